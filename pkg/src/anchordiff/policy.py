"""Anchored diffusion action head with per-anchor scoring, plus the direct
L1-regression baseline head.

Both heads share the same context-encoder architecture. The diffusion head
noises every vocabulary anchor to a sampled truncated timestep, denoises all
of them jointly through a shared trunk with an epsilon head and a score
head, supervises reconstruction only on the anchor nearest the ground-truth
chunk, and trains the score head to identify that anchor. Generation runs
the deterministic reverse chain per anchor and returns the candidate with
the highest score.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import numkit, schedule as sched_mod, vocabulary as vocab_mod
from .errors import ConfigError, DimensionError, NumericError, ShapeError
from .numkit import Mlp, MlpSpec, ParamStore, adam_step, sinusoidal_embed_batch
from .schedule import DiffusionSchedule, TruncatedRange, build_schedule, range_from_steps, truncated_range
from .vocabulary import AnchorVocabulary

LOGIT_CLAMP = 30.0


@dataclass(frozen=True)
class PolicyConfig:
    horizon: int = 5
    action_dim: int = 5
    obs_dim: int = 13
    n_tasks: int = 3
    context_dim: int = 64
    time_embed_dim: int = 32
    encoder_hidden: tuple[int, ...] = (256,)
    trunk_hidden: tuple[int, ...] = (256, 256)
    steps_total: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    truncation: float = 0.2
    score_weight: float = 0.05
    learning_rate: float = 2e-3
    batch_size: int = 64
    shared_inference_noise: bool = False
    # from-noise baseline: apply the forward process to the target chunk
    # itself (standard diffusion objective) instead of vocabulary anchors
    diffuse_targets: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.score_weight < 0.0:
            raise ConfigError(f"score weight must be >= 0, got {self.score_weight}")
        if self.horizon < 1 or self.action_dim < 1:
            raise ConfigError("horizon and action_dim must be >= 1")

    @property
    def chunk_size(self) -> int:
        return self.horizon * self.action_dim

    @property
    def feature_dim(self) -> int:
        return self.obs_dim + self.n_tasks

    @property
    def trunk_in(self) -> int:
        return self.chunk_size + self.time_embed_dim + self.context_dim


@dataclass
class TrainBatch:
    """One optimizer step's worth of samples.

    ``observations``/``task_ids`` feed the context encoder so it trains
    end-to-end; ``contexts`` and ``taus`` are filled in by the step that
    consumes the batch.
    """

    observations: np.ndarray   # (B, obs_dim)
    task_ids: np.ndarray       # (B,)
    targets: np.ndarray        # (B, H, d), normalized
    m_star: np.ndarray         # (B,)
    contexts: np.ndarray | None = None  # (B, C)
    taus: np.ndarray | None = None      # (B,)

    def __len__(self) -> int:
        return len(self.observations)


@dataclass
class GenerationResult:
    chunk: np.ndarray        # (H, d), normalized
    anchor: int
    scores: np.ndarray       # (M,)
    candidates: np.ndarray | None = None  # (M, H, d) when retained


def one_hot_tasks(task_ids: np.ndarray, n_tasks: int) -> np.ndarray:
    out = np.zeros((len(task_ids), n_tasks))
    out[np.arange(len(task_ids)), np.asarray(task_ids, dtype=int)] = 1.0
    return out


def select_anchor(score_logits: np.ndarray) -> int:
    """Argmax selection; ties resolve to the lowest index."""
    return int(np.argmax(score_logits))


class AnchoredPolicy:
    """Context encoder + denoiser trunk with epsilon and score heads."""

    head_name = "anchored"

    def __init__(self, config: PolicyConfig, vocab: AnchorVocabulary,
                 store: ParamStore | None = None) -> None:
        if (vocab.horizon, vocab.action_dim) != (config.horizon, config.action_dim):
            raise ShapeError(
                f"vocabulary shape ({vocab.horizon}, {vocab.action_dim}) does not match "
                f"config ({config.horizon}, {config.action_dim})"
            )
        if config.diffuse_targets and vocab.m != 1:
            raise ConfigError("target-diffusion training expects a single prior anchor")
        self.config = config
        self.vocab = vocab
        self.sched: DiffusionSchedule = build_schedule(
            config.steps_total, config.beta_start, config.beta_end
        )
        self.trange: TruncatedRange = truncated_range(config.truncation, config.steps_total)
        rng = np.random.default_rng(config.seed)
        self.store = store if store is not None else ParamStore()
        c = config
        self.encoder = Mlp(
            MlpSpec((c.feature_dim, *c.encoder_hidden, c.context_dim), "gelu", "identity"),
            self.store, "enc.", rng)
        self.trunk = Mlp(
            MlpSpec((c.trunk_in, *c.trunk_hidden), "gelu", "gelu"),
            self.store, "trunk.", rng)
        self.eps_head = Mlp(
            MlpSpec((c.trunk_hidden[-1], c.chunk_size), "gelu", "identity"),
            self.store, "eps.", rng)
        self.score_head = Mlp(
            MlpSpec((c.trunk_hidden[-1], 1), "gelu", "identity"),
            self.store, "score.", rng)
        self._emb_table = sinusoidal_embed_batch(np.arange(c.steps_total),
                                                 c.time_embed_dim)

    # -- context ------------------------------------------------------------

    def _features(self, observations: np.ndarray, task_ids: np.ndarray) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
        ids = np.atleast_1d(np.asarray(task_ids, dtype=int))
        if obs.shape[1] != self.config.obs_dim:
            raise DimensionError(
                f"observation dim {obs.shape[1]} != configured {self.config.obs_dim}"
            )
        return np.concatenate([obs, one_hot_tasks(ids, self.config.n_tasks)], axis=1)

    def encode_context(self, observation: np.ndarray, task_id: int) -> np.ndarray:
        ctx, _ = self.encoder.forward(self._features(observation, np.asarray([task_id])))
        return ctx[0]

    # -- denoiser -----------------------------------------------------------

    def _trunk_input(self, chunks_flat: np.ndarray, taus: np.ndarray,
                     contexts: np.ndarray) -> np.ndarray:
        emb = sinusoidal_embed_batch(taus, self.config.time_embed_dim)
        return np.concatenate([chunks_flat, emb, contexts], axis=1)

    def denoise_and_score(self, noisy: np.ndarray, tau: int, context: np.ndarray):
        """Predict (eps_hat (H, d), score_logit) for one noisy chunk.

        The epsilon head reads the trunk over the noisy chunk; the score head
        reads the trunk over the reconstructed chunk implied by that noise
        estimate, matching how candidates are scored after denoising.
        """
        noisy = np.asarray(noisy, dtype=np.float64)
        if not np.all(np.isfinite(noisy)):
            raise NumericError("non-finite noisy chunk")
        if noisy.shape != (self.config.horizon, self.config.action_dim):
            raise DimensionError(
                f"chunk shape {noisy.shape} != ({self.config.horizon}, {self.config.action_dim})"
            )
        ctx = np.asarray(context, dtype=np.float64)[None, :]
        taus = np.asarray([tau])
        z, _ = self.trunk.forward(self._trunk_input(noisy.reshape(1, -1), taus, ctx))
        eps, _ = self.eps_head.forward(z)
        x0 = sched_mod.invert_x0(noisy.reshape(1, -1), eps, tau, self.sched)
        z2, _ = self.trunk.forward(self._trunk_input(x0, taus, ctx))
        logit, _ = self.score_head.forward(z2)
        return eps.reshape(noisy.shape), float(logit[0, 0])

    def _eps_batch(self, chunks_flat: np.ndarray, tau: int, contexts: np.ndarray) -> np.ndarray:
        taus = np.full(len(chunks_flat), tau)
        z, _ = self.trunk.forward(self._trunk_input(chunks_flat, taus, contexts))
        eps, _ = self.eps_head.forward(z)
        return eps

    def _score_batch(self, chunks_flat: np.ndarray, tau: int, contexts: np.ndarray) -> np.ndarray:
        taus = np.full(len(chunks_flat), tau)
        z, _ = self.trunk.forward(self._trunk_input(chunks_flat, taus, contexts))
        logits, _ = self.score_head.forward(z)
        return logits[:, 0]

    # -- inference ----------------------------------------------------------

    def generate_chunk(self, context: np.ndarray, rng: np.random.Generator,
                       denoise_steps: int | None = None,
                       keep_candidates: bool = False,
                       shared_noise: bool | None = None) -> GenerationResult:
        """Denoise every anchor from the truncation boundary and pick by score.

        Per anchor: draw noise, initialise at tau_start, run the
        deterministic reverse chain batched over anchors, score the final
        chunks at tau_start, return the argmax-score candidate.
        """
        cfg = self.config
        trange = (self.trange if denoise_steps is None
                  else range_from_steps(denoise_steps, cfg.steps_total))
        m = self.vocab.m
        anchors = self.vocab.flat_anchors
        if shared_noise is None:
            shared_noise = cfg.shared_inference_noise
        if shared_noise:
            eps = np.repeat(rng.standard_normal((1, cfg.chunk_size)), m, axis=0)
        else:
            eps = rng.standard_normal((m, cfg.chunk_size))
        init = sched_mod.anchored_forward(anchors, eps, trange.tau_start, self.sched)
        # reusable trunk-input buffer: [chunk | emb(tau) | context]
        buf = np.empty((m, cfg.trunk_in))
        buf[:, cfg.chunk_size + cfg.time_embed_dim:] = np.asarray(context, dtype=np.float64)

        def denoiser(x, tau, _ctx):
            buf[:, :cfg.chunk_size] = x
            buf[:, cfg.chunk_size:cfg.chunk_size + cfg.time_embed_dim] = self._emb_table[tau]
            z, _ = self.trunk.forward(buf)
            out, _ = self.eps_head.forward(z)
            bad = ~np.all(np.isfinite(out), axis=1)
            if bad.any():
                raise NumericError(f"non-finite denoiser output for anchor {int(np.argmax(bad))}")
            return out

        final = sched_mod.reverse_chain(init, denoiser, trange, self.sched)
        buf[:, :cfg.chunk_size] = final
        buf[:, cfg.chunk_size:cfg.chunk_size + cfg.time_embed_dim] = self._emb_table[trange.tau_start]
        z, _ = self.trunk.forward(buf)
        logit_col, _ = self.score_head.forward(z)
        logits = logit_col[:, 0]
        scores = 1.0 / (1.0 + np.exp(-np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)))
        chosen = select_anchor(logits)
        shape = (m, cfg.horizon, cfg.action_dim)
        return GenerationResult(
            chunk=final[chosen].reshape(cfg.horizon, cfg.action_dim).copy(),
            anchor=chosen,
            scores=scores,
            candidates=final.reshape(shape).copy() if keep_candidates else None,
        )

    # -- training -----------------------------------------------------------

    def train_step(self, batch: TrainBatch, rng: np.random.Generator) -> dict:
        """One joint reconstruction + scoring update (single Adam step).

        A shared tau per sample, fresh noise per anchor; reconstruction L1
        (mean over entries) on the positive anchor only; logit BCE against
        the one-hot positive assignment summed over anchors, weighted by the
        configured score weight. Returns the loss components.
        """
        cfg = self.config
        b = len(batch)
        m = self.vocab.m
        anchors = self.vocab.flat_anchors

        feats = self._features(batch.observations, batch.task_ids)
        ctx, enc_tape = self.encoder.forward(feats, record=True)
        batch.contexts = ctx

        taus = rng.integers(0, self.trange.s_tr, size=b)
        batch.taus = taus
        eps = rng.standard_normal((b, m, cfg.chunk_size))
        sab = self.sched.sqrt_alpha_bars[taus]
        s1m = self.sched.sqrt_one_minus[taus]
        targets_rows = np.asarray(batch.targets, dtype=np.float64).reshape(b, 1, -1)
        noised = targets_rows if cfg.diffuse_targets else anchors[None, :, :]
        noisy = sab[:, None, None] * noised + s1m[:, None, None] * eps

        rows_sab = np.repeat(sab, m)
        rows_s1m = np.repeat(s1m, m)
        emb_rows = np.repeat(sinusoidal_embed_batch(taus, cfg.time_embed_dim), m, axis=0)
        ctx_rows = np.repeat(ctx, m, axis=0)
        x = np.concatenate([noisy.reshape(b * m, cfg.chunk_size), emb_rows, ctx_rows], axis=1)
        z, trunk_tape = self.trunk.forward(x, record=True)
        eps_hat, eps_tape = self.eps_head.forward(z, record=True)

        raw_x0 = (noisy.reshape(b * m, -1) - rows_s1m[:, None] * eps_hat) / rows_sab[:, None]
        inside = np.abs(raw_x0) <= sched_mod.X0_CLAMP
        x0 = np.clip(raw_x0, -sched_mod.X0_CLAMP, sched_mod.X0_CLAMP)

        # score the reconstructions, as at inference
        x_score = np.concatenate([x0, emb_rows, ctx_rows], axis=1)
        z2, trunk_tape2 = self.trunk.forward(x_score, record=True)
        logits, score_tape = self.score_head.forward(z2, record=True)

        pos_rows = np.arange(b) * m + np.asarray(batch.m_star, dtype=int)
        targets_flat = np.asarray(batch.targets, dtype=np.float64).reshape(b, -1)
        diff = x0[pos_rows] - targets_flat
        recon = float(np.abs(diff).mean())

        y = np.zeros(b * m)
        y[pos_rows] = 1.0
        zc = np.clip(logits[:, 0], -LOGIT_CLAMP, LOGIT_CLAMP)
        bce = float(cfg.score_weight * (np.logaddexp(0.0, zc) - y * zc).reshape(b, m).sum(axis=1).mean())
        total = recon + bce

        # backward
        sig = 1.0 / (1.0 + np.exp(-zc))
        d_logits = (cfg.score_weight * (sig - y) / b) * (np.abs(logits[:, 0]) < LOGIT_CLAMP)
        dz2 = self.score_head.backward(score_tape, d_logits[:, None])
        dx2 = self.trunk.backward(trunk_tape2, dz2)
        d_x0 = np.zeros_like(x0)
        d_x0[pos_rows] = np.sign(diff) / (b * cfg.chunk_size)
        d_x0 += dx2[:, :cfg.chunk_size]  # score pathway sees the reconstruction
        d_eps_hat = d_x0 * inside * (-(rows_s1m / rows_sab))[:, None]
        dz = self.eps_head.backward(eps_tape, d_eps_hat)
        dx = self.trunk.backward(trunk_tape, dz)
        ctx_cols = slice(cfg.chunk_size + cfg.time_embed_dim, None)
        d_ctx = (dx[:, ctx_cols] + dx2[:, ctx_cols]).reshape(b, m, -1).sum(axis=1)
        self.encoder.backward(enc_tape, d_ctx)
        adam_step(self.store, cfg.learning_rate)

        accuracy = float(np.mean(np.argmax(logits[:, 0].reshape(b, m), axis=1) == batch.m_star))
        return {"recon_l1": recon, "bce": bce, "total": total, "score_accuracy": accuracy}

    # -- persistence ----------------------------------------------------------

    def save(self, out_dir) -> None:
        save_policy(self, out_dir)


class L1Policy:
    """Deterministic chunk regression with the same encoder architecture."""

    head_name = "l1"

    def __init__(self, config: PolicyConfig, stats: vocab_mod.NormStats,
                 store: ParamStore | None = None) -> None:
        self.config = config
        self.stats = stats
        rng = np.random.default_rng(config.seed)
        self.store = store if store is not None else ParamStore()
        c = config
        self.encoder = Mlp(
            MlpSpec((c.feature_dim, *c.encoder_hidden, c.context_dim), "gelu", "identity"),
            self.store, "enc.", rng)
        self.regressor = Mlp(
            MlpSpec((c.context_dim, *c.trunk_hidden, c.chunk_size), "gelu", "identity"),
            self.store, "reg.", rng)

    def _features(self, observations, task_ids):
        obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
        ids = np.atleast_1d(np.asarray(task_ids, dtype=int))
        return np.concatenate([obs, one_hot_tasks(ids, self.config.n_tasks)], axis=1)

    def encode_context(self, observation, task_id):
        ctx, _ = self.encoder.forward(self._features(observation, np.asarray([task_id])))
        return ctx[0]

    def generate_chunk(self, context, rng=None, **_ignored) -> GenerationResult:
        pred, _ = self.regressor.forward(np.asarray(context, dtype=np.float64)[None, :])
        return GenerationResult(
            chunk=pred.reshape(self.config.horizon, self.config.action_dim),
            anchor=0,
            scores=np.ones(1),
        )

    def train_step(self, batch: TrainBatch, rng=None) -> dict:
        cfg = self.config
        b = len(batch)
        feats = self._features(batch.observations, batch.task_ids)
        ctx, enc_tape = self.encoder.forward(feats, record=True)
        batch.contexts = ctx
        pred, reg_tape = self.regressor.forward(ctx, record=True)
        diff = pred - np.asarray(batch.targets, dtype=np.float64).reshape(b, -1)
        loss = float(np.abs(diff).mean())
        d_pred = np.sign(diff) / diff.size
        d_ctx = self.regressor.backward(reg_tape, d_pred)
        self.encoder.backward(enc_tape, d_ctx)
        adam_step(self.store, cfg.learning_rate)
        return {"recon_l1": loss, "bce": 0.0, "total": loss, "score_accuracy": 0.0}

    def save(self, out_dir) -> None:
        save_policy(self, out_dir)


def zero_anchor_vocabulary(config: PolicyConfig, stats: vocab_mod.NormStats) -> AnchorVocabulary:
    """Single all-zero anchor: the uninformed prior used by the from-noise
    diffusion baseline."""
    return AnchorVocabulary(
        anchors=np.zeros((1, config.horizon, config.action_dim)), stats=stats
    )


# ---------------------------------------------------------------------------
# FLOP accounting (dense layers, 2 * fan_in * fan_out per sample)
# ---------------------------------------------------------------------------


def mlp_flops(widths) -> int:
    return int(sum(2 * a * b for a, b in zip(widths[:-1], widths[1:])))


def flops_estimate(config: PolicyConfig, head: str = "anchored", m: int = 20,
                   denoise_steps: int | None = None, max_steps: int = 200) -> dict:
    """Analytic per-query and per-episode floating-point-operation counts."""
    c = config
    encoder = mlp_flops((c.feature_dim, *c.encoder_hidden, c.context_dim))
    if head == "l1":
        head_per_query = mlp_flops((c.context_dim, *c.trunk_hidden, c.chunk_size))
    else:
        steps = denoise_steps if denoise_steps is not None else truncated_range(
            c.truncation, c.steps_total).s_tr
        trunk = mlp_flops((c.trunk_in, *c.trunk_hidden))
        eps_head = 2 * c.trunk_hidden[-1] * c.chunk_size
        score_head = 2 * c.trunk_hidden[-1]
        head_per_query = steps * m * (trunk + eps_head) + m * (trunk + score_head)
    queries = -(-max_steps // c.horizon)  # ceil
    return {
        "encoder_per_query": encoder,
        "head_per_query": head_per_query,
        "total_per_query": encoder + head_per_query,
        "queries_per_episode": queries,
        "encoder_per_episode": encoder * queries,
        "total_per_episode": (encoder + head_per_query) * queries,
    }


# ---------------------------------------------------------------------------
# Persistence: parameter container + JSON sidecar + embedded vocabulary
# ---------------------------------------------------------------------------


def save_policy(policy, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    numkit.save_params(policy.store, os.path.join(out_dir, "params.anvp"))
    meta = {"head": policy.head_name, "config": asdict(policy.config)}
    with open(os.path.join(out_dir, "policy.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    if isinstance(policy, AnchoredPolicy):
        vocab_mod.vocab_save(policy.vocab, os.path.join(out_dir, "vocab.anvc"))
    else:
        stats_store = ParamStore()
        stats_store.add("lo", policy.stats.lo[None, :])
        stats_store.add("hi", policy.stats.hi[None, :])
        numkit.save_params(stats_store, os.path.join(out_dir, "stats.anvp"))


def load_policy(out_dir):
    with open(os.path.join(out_dir, "policy.json")) as fh:
        meta = json.load(fh)
    cfg_dict = dict(meta["config"])
    for key in ("encoder_hidden", "trunk_hidden"):
        cfg_dict[key] = tuple(cfg_dict[key])
    config = PolicyConfig(**cfg_dict)
    store, _ = numkit.load_params(os.path.join(out_dir, "params.anvp"))
    if meta["head"] == "l1":
        stats_store, _ = numkit.load_params(os.path.join(out_dir, "stats.anvp"))
        stats = vocab_mod.NormStats(lo=stats_store.params["lo"][0],
                                    hi=stats_store.params["hi"][0])
        return L1Policy(config, stats, store=store)
    vocab = vocab_mod.vocab_load(os.path.join(out_dir, "vocab.anvc"),
                                 expect_horizon=config.horizon,
                                 expect_dim=config.action_dim)
    return AnchoredPolicy(config, vocab, store=store)
