"""End-to-end preparation and training drivers shared by the CLI, the
benchmark harness, and the test suite."""

from __future__ import annotations

import json

import numpy as np

from . import simenv, vocabulary as vocab_mod
from .errors import DataError
from .policy import AnchoredPolicy, L1Policy, PolicyConfig, TrainBatch, zero_anchor_vocabulary
from .residual import ResidualConfig, ResidualCorrector, collect_residual_dataset, residual_train
from .simenv import TASKS, DisturbanceConfig, Episode, PlanarEnv, choose_side, expert_action
from .vocabulary import AnchorVocabulary, normalize


class TrainData:
    """Flat per-chunk training arrays derived from a set of episodes."""

    def __init__(self, observations: np.ndarray, task_ids: np.ndarray,
                 chunks_norm: np.ndarray, m_star: np.ndarray) -> None:
        self.observations = observations
        self.task_ids = task_ids
        self.chunks_norm = chunks_norm
        self.m_star = m_star

    def __len__(self) -> int:
        return len(self.observations)

    def sample_batch(self, size: int, rng: np.random.Generator) -> TrainBatch:
        idx = rng.integers(0, len(self), size=size)
        return TrainBatch(
            observations=self.observations[idx],
            task_ids=self.task_ids[idx],
            targets=self.chunks_norm[idx],
            m_star=self.m_star[idx],
        )


def episodes_to_chunks(episodes: list[Episode], horizon: int):
    """Segment every episode; each chunk pairs with the observation at its
    start index. Returns (observations, task_ids, raw_chunks)."""
    if not episodes:
        raise DataError("no episodes to segment")
    obs_rows, task_rows, chunk_rows = [], [], []
    for ep in episodes:
        chunks = vocab_mod.segment_chunks(ep.actions, horizon)
        obs_rows.append(ep.observations[: len(chunks)])
        task_rows.append(np.full(len(chunks), TASKS.index(ep.task)))
        chunk_rows.append(chunks)
    return (
        np.concatenate(obs_rows),
        np.concatenate(task_rows),
        np.concatenate(chunk_rows),
    )


def build_vocabulary(episodes: list[Episode], horizon: int, m: int, seed: int,
                     max_fit_points: int = 20_000):
    """Fit normalization stats and k-means anchors; returns (vocab, coverage).

    Clustering runs on at most ``max_fit_points`` chunks (seeded subsample)
    to keep desk-scale runtimes; coverage statistics are computed over the
    full chunk set.
    """
    _, _, chunks = episodes_to_chunks(episodes, horizon)
    stats = vocab_mod.fit_norm(chunks)
    normed = normalize(chunks, stats)
    rng = np.random.default_rng(seed)
    fit_set = normed
    if len(normed) > max_fit_points:
        fit_set = normed[rng.choice(len(normed), size=max_fit_points, replace=False)]
    vocab = vocab_mod.kmeans_fit(fit_set, m, rng, stats)
    dists = vocab_mod.nearest_anchor_distances(normed, vocab)
    coverage = {
        "chunks": int(len(normed)),
        "mean_l1": float(dists.mean()),
        "median_l1": float(np.median(dists)),
        "p99_l1": float(np.percentile(dists, 99)),
        "max_l1": float(dists.max()),
    }
    return vocab, coverage


def make_train_data(episodes: list[Episode], vocab: AnchorVocabulary,
                    horizon: int) -> TrainData:
    observations, task_ids, chunks = episodes_to_chunks(episodes, horizon)
    chunks_norm = normalize(chunks, vocab.stats)
    m_star = vocab_mod.assign_positive_batch(chunks_norm, vocab)
    return TrainData(observations, task_ids, chunks_norm, m_star)


def train_policy(policy, data: TrainData, steps: int, rng: np.random.Generator,
                 log_path=None, log_every: int = 50) -> list[dict]:
    """Run the head's optimizer loop; optionally stream a JSON-lines log."""
    history = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for step in range(steps):
            batch = data.sample_batch(policy.config.batch_size, rng)
            metrics = policy.train_step(batch, rng)
            if step % log_every == 0 or step == steps - 1:
                row = {"step": step, **{k: round(v, 6) for k, v in metrics.items()}}
                history.append(row)
                if log_fh:
                    log_fh.write(json.dumps(row) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return history


def make_policy(head: str, config: PolicyConfig, vocab: AnchorVocabulary):
    """Instantiate a head: anchored, l1, or the from-noise diffusion baseline.

    The from-noise baseline reuses the anchored machinery with a single
    all-zero anchor and the full (untruncated) schedule, so its training
    marginals match its pure-noise inference initialization.
    """
    if head == "anchored":
        return AnchoredPolicy(config, vocab)
    if head == "l1":
        return L1Policy(config, vocab.stats)
    if head == "from_noise_diffusion":
        from dataclasses import replace

        cfg = replace(config, truncation=1.0, diffuse_targets=True)
        return AnchoredPolicy(cfg, zero_anchor_vocabulary(cfg, vocab.stats))
    raise DataError(f"unknown head {head!r}")


def train_head(head: str, episodes: list[Episode], vocab: AnchorVocabulary,
               config: PolicyConfig, steps: int, seed: int, log_path=None):
    policy = make_policy(head, config, vocab)
    data = make_train_data(episodes, vocab, config.horizon)
    if head == "from_noise_diffusion":
        data.m_star = np.zeros(len(data), dtype=np.int64)
    train_policy(policy, data, steps, np.random.default_rng([seed, 1]), log_path=log_path)
    return policy


# ---------------------------------------------------------------------------
# Residual training pipeline
# ---------------------------------------------------------------------------


def train_residual_for_policy(policy: AnchoredPolicy, task: str, episodes: int,
                              seed: int, disturbance: DisturbanceConfig,
                              steps: int = 2500,
                              config: ResidualConfig | None = None):
    """Collect DAgger-style relabels on frozen-policy rollouts and fit the
    corrector. Returns (corrector, final_loss, n_samples)."""
    cfg = config or ResidualConfig(
        obs_dim=policy.config.obs_dim, n_tasks=policy.config.n_tasks,
        action_dim=policy.config.action_dim, horizon=policy.config.horizon,
        seed=seed,
    )
    stats = policy.vocab.stats
    task_id = TASKS.index(task)

    def plan_chunk(obs, rng):
        ctx = policy.encode_context(obs, task_id)
        return policy.generate_chunk(ctx, rng).chunk

    def expert_relabel(state):
        side = choose_side("nearest", state=state)
        return normalize(expert_action(state, side), stats)

    def to_env_action(normalized):
        return vocab_mod.denormalize(normalized, stats)

    samples = collect_residual_dataset(
        plan_chunk, lambda ep: PlanarEnv(task, disturbance), expert_relabel,
        to_env_action, task_id=task_id, episodes=episodes, seed=seed,
        horizon=policy.config.horizon, bound=cfg.bound,
    )
    corrector = ResidualCorrector(cfg)
    loss = residual_train(samples, corrector, steps, np.random.default_rng([seed, 2]))
    return corrector, loss, len(samples)


def generate_and_load(task: str, episodes: int, seed: int, path) -> list[Episode]:
    simenv.generate_dataset(task, episodes, seed, path)
    return simenv.load_dataset(path)
