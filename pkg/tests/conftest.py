"""Session-scoped trained artifacts shared by the acceptance suite.

Everything trains from scratch on first use: the bimodal pick_detour
dataset, per-horizon vocabularies, the anchored/l1 heads across the chunk
sweep, the from-noise diffusion baseline, and the drift-trained residual
corrector. Budgets are uniform across horizons so sweep comparisons are
fair.
"""

import time

import numpy as np
import pytest

from anchordiff import pipeline
from anchordiff.harness import RunConfig
from anchordiff.policy import PolicyConfig
from anchordiff.simenv import DisturbanceConfig

DATASET_EPISODES = 2000
TRAIN_STEPS = 6000
SWEEP_HORIZONS = (1, 2, 5, 8, 10)
ANCHORS = 20
DRIFT = DisturbanceConfig(kind="drift", magnitude=0.12, seed=5)
RESIDUAL_EPISODES = 100
RESIDUAL_STEPS = 2500


class Bundle:
    """Lazily trained artifact cache; heads train on first access."""

    def __init__(self, tmp_dir):
        self.tmp_dir = tmp_dir
        t0 = time.time()
        self.episodes = pipeline.generate_and_load(
            "pick_detour", DATASET_EPISODES, 0, tmp_dir / "pick_detour.jsonl.gz")
        self._vocabs = {}
        self._heads = {}
        self._residual = None
        self._log(f"dataset ready ({time.time() - t0:.0f}s)")

    def _log(self, msg):
        print(f"[bundle] {msg}", flush=True)

    def vocab(self, horizon):
        if horizon not in self._vocabs:
            t0 = time.time()
            vocab, coverage = pipeline.build_vocabulary(
                self.episodes, horizon, ANCHORS, seed=0)
            self._vocabs[horizon] = (vocab, coverage)
            self._log(f"vocab H={horizon} ({time.time() - t0:.0f}s) "
                      f"mean_l1={coverage['mean_l1']:.3f}")
        return self._vocabs[horizon][0]

    def coverage(self, horizon):
        self.vocab(horizon)
        return self._vocabs[horizon][1]

    def head(self, kind, horizon=5):
        key = (kind, horizon)
        if key not in self._heads:
            t0 = time.time()
            config = PolicyConfig(horizon=horizon, seed=0)
            policy = pipeline.train_head(kind, self.episodes, self.vocab(horizon),
                                         config, TRAIN_STEPS, seed=0)
            self._heads[key] = policy
            self._log(f"{kind} H={horizon} trained ({time.time() - t0:.0f}s)")
        return self._heads[key]

    def residual(self):
        if self._residual is None:
            t0 = time.time()
            corrector, loss, n = pipeline.train_residual_for_policy(
                self.head("anchored", 5), "pick_detour", RESIDUAL_EPISODES,
                seed=0, disturbance=DRIFT, steps=RESIDUAL_STEPS)
            self._residual = corrector
            self._log(f"residual trained ({time.time() - t0:.0f}s) "
                      f"loss={loss:.4f} samples={n}")
        return self._residual

    def run_config(self, **overrides):
        base = dict(task="pick_detour", head="anchored", horizon=5, seed=0,
                    eval_episodes=100, trials=1)
        base.update(overrides)
        return RunConfig(**base)


@pytest.fixture(scope="session")
def bundle(tmp_path_factory):
    return Bundle(tmp_path_factory.mktemp("artifacts"))
