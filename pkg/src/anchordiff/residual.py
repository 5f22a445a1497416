"""Test-time residual correction: bounded per-step micro-adjustments applied
while a chunk executes, trained separately against expert relabels collected
on frozen-policy rollouts."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import numkit
from .errors import ConfigError, ContractError, DataError
from .numkit import Mlp, MlpSpec, ParamStore, adam_step, sinusoidal_embed_batch

RESIDUAL_MAGIC = b"ANVR"


@dataclass(frozen=True)
class ResidualConfig:
    obs_dim: int = 13
    n_tasks: int = 3
    action_dim: int = 5
    horizon: int = 5
    phase_embed_dim: int = 8
    hidden: tuple[int, ...] = (32,)
    bound: float = 0.1          # eps_res, normalized action units
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.bound <= 0.0:
            raise ConfigError(f"residual bound must be positive, got {self.bound}")

    @property
    def feature_dim(self) -> int:
        return self.obs_dim + self.n_tasks + self.action_dim + self.phase_embed_dim


@dataclass
class ResidualSample:
    observation: np.ndarray   # (obs_dim,)
    task_id: int
    nominal: np.ndarray       # (action_dim,), normalized
    phase: int
    delta_star: np.ndarray    # (action_dim,), clamped to +-bound


class ResidualCorrector:
    """Tanh-bounded MLP over [obs | task one-hot | nominal action | phase
    embedding]; output scaled to the configured bound."""

    def __init__(self, config: ResidualConfig, store: ParamStore | None = None) -> None:
        self.config = config
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(config.seed)
        self.net = Mlp(
            MlpSpec((config.feature_dim, *config.hidden, config.action_dim), "gelu", "tanh"),
            self.store, "res.", rng)

    def zero_init(self) -> None:
        for p in self.store.params.values():
            p[...] = 0.0

    def _features(self, observations, task_ids, nominals, phases):
        c = self.config
        obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
        nom = np.atleast_2d(np.asarray(nominals, dtype=np.float64))
        ids = np.atleast_1d(np.asarray(task_ids, dtype=int))
        one_hot = np.zeros((len(ids), c.n_tasks))
        one_hot[np.arange(len(ids)), ids] = 1.0
        emb = sinusoidal_embed_batch(np.atleast_1d(phases), c.phase_embed_dim, max_period=100.0)
        return np.concatenate([obs, one_hot, nom, emb], axis=1)

    def predict(self, observation: np.ndarray, task_id: int, nominal: np.ndarray,
                phase: int) -> np.ndarray:
        if not 0 <= phase < self.config.horizon:
            raise ContractError(f"phase {phase} outside chunk horizon {self.config.horizon}")
        feats = self._features(observation, np.asarray([task_id]), nominal, np.asarray([phase]))
        out, _ = self.net.forward(feats)
        return self.config.bound * out[0]

    def train_step(self, feats: np.ndarray, deltas: np.ndarray) -> float:
        out, tape = self.net.forward(feats, record=True)
        pred = self.config.bound * out
        diff = pred - deltas
        loss = float(np.abs(diff).mean())
        self.net.backward(tape, self.config.bound * np.sign(diff) / diff.size)
        adam_step(self.store, self.config.learning_rate)
        return loss

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        numkit.save_params(self.store, os.path.join(out_dir, "residual.anvr"),
                           magic=RESIDUAL_MAGIC)
        with open(os.path.join(out_dir, "residual.json"), "w") as fh:
            json.dump(asdict(self.config), fh, indent=1, sort_keys=True)


def load_residual(out_dir) -> ResidualCorrector:
    with open(os.path.join(out_dir, "residual.json")) as fh:
        cfg_dict = json.load(fh)
    cfg_dict["hidden"] = tuple(cfg_dict["hidden"])
    store, _ = numkit.load_params(os.path.join(out_dir, "residual.anvr"),
                                  magic=RESIDUAL_MAGIC)
    return ResidualCorrector(ResidualConfig(**cfg_dict), store=store)


def apply_residual(nominal: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """a = nominal + delta, clamped to the valid normalized action range."""
    return np.clip(np.asarray(nominal) + np.asarray(delta), -1.0, 1.0)


def collect_residual_dataset(plan_chunk, env_factory, expert_relabel, to_env_action,
                             task_id: int, episodes: int, seed: int, horizon: int,
                             bound: float) -> list[ResidualSample]:
    """Roll the frozen planner and relabel every executed step.

    ``plan_chunk(observation, rng) -> (H, d) normalized chunk`` is queried on
    a receding horizon; ``expert_relabel(state) -> normalized action`` is the
    recovery target at the realized state; ``to_env_action`` maps normalized
    actions to environment units. Targets are clamped to the representable
    bound. Episodes that raise are dropped.
    """
    samples: list[ResidualSample] = []
    for ep in range(episodes):
        ep_samples: list[ResidualSample] = []
        try:
            env = env_factory(ep)
            state, obs = env.reset(seed + ep)
            done = False
            query = 0
            while not done:
                chunk = plan_chunk(obs, np.random.default_rng([seed, ep, query]))
                query += 1
                for j in range(horizon):
                    nominal = chunk[j]
                    expert_norm = expert_relabel(state)
                    delta = np.clip(expert_norm - nominal, -bound, bound)
                    ep_samples.append(ResidualSample(
                        observation=obs.copy(), task_id=task_id,
                        nominal=nominal.copy(), phase=j, delta_star=delta,
                    ))
                    state, obs, done, _ = env.step(to_env_action(nominal))
                    if done:
                        break
        except Exception:  # noqa: BLE001 - drop the episode, keep collecting
            continue
        samples.extend(ep_samples)
    return samples


def residual_train(samples: list[ResidualSample], corrector: ResidualCorrector,
                   steps: int, rng: np.random.Generator,
                   batch_size: int = 256) -> float:
    """Minimize mean L1 between predictions and relabelled micro-adjustments."""
    if not samples:
        raise DataError("residual training needs a non-empty dataset")
    c = corrector.config
    obs = np.array([s.observation for s in samples])
    ids = np.array([s.task_id for s in samples])
    noms = np.array([s.nominal for s in samples])
    phases = np.array([s.phase for s in samples])
    deltas = np.array([s.delta_star for s in samples])
    feats = corrector._features(obs, ids, noms, phases)
    loss = float("nan")
    for _ in range(steps):
        idx = rng.integers(0, len(samples), size=min(batch_size, len(samples)))
        loss = corrector.train_step(feats[idx], deltas[idx])
    return loss
