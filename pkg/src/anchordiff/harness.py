"""Experiment driver: closed-loop chunked rollouts, evaluation with seed
discipline, the three benchmark ablations, and trajectory-candidate export.

Seed discipline: global seed -> per-trial block -> per-episode seed ->
per-query rng stream. Metric CSVs contain only deterministic fields so a
rerun with the same seeds is byte-identical; wall-clock timing goes to the
summary, never the CSV.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import binomtest

from .errors import ConfigError, DataError
from .policy import AnchoredPolicy, flops_estimate
from .residual import ResidualCorrector, apply_residual
from .simenv import MAX_STEPS, TASKS, DisturbanceConfig, PlanarEnv, final_error, simulate_chunk
from .vocabulary import denormalize

EVAL_SEED_BLOCK = 500_000  # keeps evaluation resets disjoint from dataset seeds
TIMING_WARMUP = 10


@dataclass(frozen=True)
class RunConfig:
    task: str = "pick_detour"
    head: str = "anchored"  # anchored | l1 | from_noise_diffusion
    horizon: int = 5
    steps_total: int = 50
    truncation: float = 0.2
    denoise_steps: int | None = None  # explicit reverse-step budget override
    anchors: int = 20
    score_weight: float = 0.05
    residual_bound: float = 0.1
    use_residual: bool = False
    disturbance_kind: str = "none"
    disturbance_magnitude: float = 0.0
    disturbance_seed: int = 0
    seed: int = 0
    train_steps: int = 3000
    batch_size: int = 64
    learning_rate: float = 2e-3
    dataset_episodes: int = 2000
    eval_episodes: int = 100
    trials: int = 3

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.head not in ("anchored", "l1", "from_noise_diffusion"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.horizon not in (1, 2, 5, 8, 10):
            raise ConfigError(f"horizon must be one of 1/2/5/8/10, got {self.horizon}")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")

    def disturbance(self) -> DisturbanceConfig:
        return DisturbanceConfig(kind=self.disturbance_kind,
                                 magnitude=self.disturbance_magnitude,
                                 seed=self.disturbance_seed)


def config_from_file(path) -> RunConfig:
    """Load a RunConfig from JSON or plain key=value lines."""
    text = open(path).read()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        raw = json.loads(text)
    else:
        raw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"bad config line {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            raw[key] = value
    fields = {f.name: f.type for f in RunConfig.__dataclass_fields__.values()}
    parsed = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            if value.lower() in ("true", "false"):
                value = value.lower() == "true"
            elif value.lower() in ("none", "null"):
                value = None
            else:
                try:
                    value = int(value)
                except ValueError:
                    try:
                        value = float(value)
                    except ValueError:
                        pass
        parsed[key] = value
    return RunConfig(**parsed)


@dataclass
class EpisodeMetrics:
    success: bool
    steps: int
    queries: int
    final_error: float
    flops_per_episode: float
    query_times: list[float] = field(default_factory=list)
    residual_times: list[float] = field(default_factory=list)


@dataclass
class QueryRecord:
    base_state: object
    candidates: np.ndarray | None
    chosen: int
    scores: np.ndarray


@dataclass
class TrajectoryLog:
    seed: int
    queries: list[QueryRecord] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)  # env units
    states: list[tuple] = field(default_factory=list)


def episode_seed(config: RunConfig, trial: int, episode: int) -> int:
    return EVAL_SEED_BLOCK + config.seed * 1_000_003 + trial * 10_007 + episode


def rollout(policy, residual: ResidualCorrector | None, env: PlanarEnv,
            config: RunConfig, seed: int,
            keep_candidates: bool = False) -> tuple[EpisodeMetrics, TrajectoryLog]:
    """Receding-horizon execution of generated chunks in one seeded episode."""
    stats = policy.vocab.stats if isinstance(policy, AnchoredPolicy) else policy.stats
    task_id = TASKS.index(config.task)
    state, obs = env.reset(seed)
    log = TrajectoryLog(seed=seed)
    metrics = EpisodeMetrics(success=False, steps=0, queries=0, final_error=0.0,
                             flops_per_episode=0.0)
    per_query = flops_estimate(
        policy.config, head=config.head,
        m=policy.vocab.m if isinstance(policy, AnchoredPolicy) else 1,
        denoise_steps=config.denoise_steps, max_steps=MAX_STEPS,
    )["total_per_query"]
    done = False
    query_idx = 0
    while not done:
        rng = np.random.default_rng([seed, query_idx])
        t0 = time.perf_counter()
        ctx = policy.encode_context(obs, task_id)
        gen = policy.generate_chunk(ctx, rng, denoise_steps=config.denoise_steps,
                                    keep_candidates=keep_candidates)
        metrics.query_times.append(time.perf_counter() - t0)
        metrics.queries += 1
        query_idx += 1
        log.queries.append(QueryRecord(base_state=state, candidates=gen.candidates,
                                       chosen=gen.anchor, scores=gen.scores))
        for j in range(config.horizon):
            a_norm = gen.chunk[j]
            if residual is not None:
                t1 = time.perf_counter()
                delta = residual.predict(obs, task_id, a_norm, j)
                a_norm = apply_residual(a_norm, delta)
                metrics.residual_times.append(time.perf_counter() - t1)
            action = denormalize(a_norm, stats)
            state, obs, done, success = env.step(action)
            metrics.steps += 1
            log.actions.append(action)
            log.states.append((state.x, state.y, state.theta, state.q1, state.q2,
                               state.grip))
            if done:
                metrics.success = bool(success)
                break
    metrics.final_error = final_error(state)
    metrics.flops_per_episode = per_query * metrics.queries
    return metrics, log


def _median(values: list[float]) -> float:
    return float(np.median(values)) if values else float("nan")


def evaluate(config: RunConfig, policy, residual: ResidualCorrector | None = None,
             out_dir=None, keep_candidates: bool = False):
    """Trials x episodes with disjoint seed blocks.

    Returns (summary dict, per-episode metric rows, trajectory logs). When
    ``out_dir`` is given, writes episodes.csv (deterministic fields only)
    and summary.json (includes timing).
    """
    rows = []
    logs = []
    all_query_times: list[float] = []
    all_residual_times: list[float] = []
    trial_rates = []
    for trial in range(config.trials):
        successes = 0
        for ep in range(config.eval_episodes):
            seed = episode_seed(config, trial, ep)
            env = PlanarEnv(config.task, config.disturbance())
            metrics, log = rollout(policy, residual, env, config, seed,
                                   keep_candidates=keep_candidates)
            successes += metrics.success
            rows.append({
                "trial": trial, "episode": ep, "seed": seed,
                "success": int(metrics.success), "steps": metrics.steps,
                "queries": metrics.queries,
                "final_error": metrics.final_error,
                "flops_per_episode": metrics.flops_per_episode,
            })
            logs.append(log)
            all_query_times.extend(metrics.query_times)
            all_residual_times.extend(metrics.residual_times)
        trial_rates.append(successes / config.eval_episodes)
    timed = all_query_times[TIMING_WARMUP:] or all_query_times
    summary = {
        "config": asdict(config),
        "success_mean": float(np.mean(trial_rates)),
        "success_std": float(np.std(trial_rates)),
        "trial_rates": trial_rates,
        "median_query_seconds": _median(timed),
        "median_residual_seconds": _median(all_residual_times),
        "episodes": len(rows),
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics_csv(rows, os.path.join(out_dir, "episodes.csv"))
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
    return summary, rows, logs


def write_metrics_csv(rows: list[dict], path) -> None:
    if not rows:
        raise DataError("no rows to write")
    keys = list(rows[0].keys())
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(keys) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(row[k]) for k in keys) + "\n")


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def sign_test(wins: int, losses: int) -> float:
    """One-sided paired sign test p-value (ties discarded by the caller)."""
    n = wins + losses
    if n == 0:
        return 1.0
    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue)


def paired_successes(config: RunConfig, policy, residual=None) -> np.ndarray:
    """Per-episode success indicators over the config's seed grid."""
    _, rows, _ = evaluate(config, policy, residual)
    return np.array([r["success"] for r in rows], dtype=bool)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


def ablation_denoise_budget(anchored: AnchoredPolicy, from_noise: AnchoredPolicy,
                            base_config: RunConfig, out_dir=None) -> dict:
    """Success and measured query frequency across reverse-step budgets."""
    rows = []
    per_episode: dict[str, np.ndarray] = {}
    grid = [("from_noise_diffusion", from_noise, s) for s in (50, 25, 10, 5)]
    grid += [("anchored", anchored, s) for s in (10, 5)]
    for head, policy, steps in grid:
        cfg = replace(base_config, head=head, denoise_steps=steps)
        summary, ep_rows, _ = evaluate(cfg, policy)
        key = f"{head}@{steps}"
        per_episode[key] = np.array([r["success"] for r in ep_rows], dtype=bool)
        rows.append({
            "method": head, "denoise_steps": steps,
            "success": summary["success_mean"],
            "median_query_seconds": summary["median_query_seconds"],
            "query_hz": 1.0 / summary["median_query_seconds"],
        })
    result = {"rows": rows, "per_episode": per_episode}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics_csv(
            [{k: v for k, v in row.items()} for row in rows],
            os.path.join(out_dir, "denoise_budget.csv"))
    return result


def ablation_residual(policy: AnchoredPolicy, residual: ResidualCorrector,
                      base_config: RunConfig, out_dir=None) -> dict:
    """Paired with/without-residual evaluation under the drift disturbance."""
    cfg_off = replace(base_config, use_residual=False)
    cfg_on = replace(base_config, use_residual=True)
    summary_off, rows_off, _ = evaluate(cfg_off, policy, None)
    summary_on, rows_on, _ = evaluate(cfg_on, policy, residual)
    horizon = base_config.horizon
    step_time_off = summary_off["median_query_seconds"] / horizon
    step_time_on = (summary_on["median_query_seconds"] / horizon
                    + summary_on["median_residual_seconds"])
    policy_params = policy.store.n_params()
    residual_params = residual.store.n_params()
    rows = [
        {"method": "without_residual", "success": summary_off["success_mean"],
         "per_step_hz": 1.0 / step_time_off, "params": policy_params},
        {"method": "with_residual", "success": summary_on["success_mean"],
         "per_step_hz": 1.0 / step_time_on,
         "params": policy_params + residual_params},
    ]
    result = {
        "rows": rows,
        "success_without": np.array([r["success"] for r in rows_off], dtype=bool),
        "success_with": np.array([r["success"] for r in rows_on], dtype=bool),
        "residual_params": residual_params,
        "policy_params": policy_params,
        "residual_fraction": residual_params / (policy_params + residual_params),
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics_csv(rows, os.path.join(out_dir, "residual_ablation.csv"))
    return result


def ablation_chunk_sweep(policies_by_h: dict[int, dict], base_config: RunConfig,
                         out_dir=None) -> dict:
    """Success rate and FLOP accounting per (head, horizon).

    ``policies_by_h[h]`` maps head name -> trained policy for horizon h.
    """
    rows = []
    for h in sorted(policies_by_h):
        for head, policy in sorted(policies_by_h[h].items()):
            cfg = replace(base_config, head=head, horizon=h)
            summary, _, _ = evaluate(cfg, policy)
            counts = flops_estimate(
                policy.config, head=head,
                m=policy.vocab.m if isinstance(policy, AnchoredPolicy) else 1,
                max_steps=MAX_STEPS)
            rows.append({
                "head": head, "horizon": h,
                "success": summary["success_mean"],
                "encoder_flops_per_episode": counts["encoder_per_episode"],
                "total_flops_per_episode": counts["total_per_episode"],
                "queries_per_episode": counts["queries_per_episode"],
            })
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics_csv(rows, os.path.join(out_dir, "chunk_sweep.csv"))
    return {"rows": rows}


# ---------------------------------------------------------------------------
# Candidate-trajectory export
# ---------------------------------------------------------------------------


def export_trajectory_viz(logs: list[TrajectoryLog], stats, path) -> list[dict]:
    """One CSV row per (episode, query, anchor, step): the base positions each
    denoised candidate would visit, with the chosen candidate flagged."""
    rows = []
    for ep_idx, log in enumerate(logs):
        for q_idx, record in enumerate(log.queries):
            if record.candidates is None:
                raise DataError("rollout was not run with keep_candidates=True")
            for a_idx, cand in enumerate(record.candidates):
                positions = simulate_chunk(record.base_state, denormalize(cand, stats))
                for s_idx, (x, y) in enumerate(positions):
                    rows.append({
                        "episode": ep_idx, "query": q_idx, "anchor": a_idx,
                        "step": s_idx, "x": float(x), "y": float(y),
                        "chosen": int(a_idx == record.chosen),
                    })
    write_metrics_csv(rows, path)
    return rows


def candidate_spread_by_query(log: TrajectoryLog, stats) -> list[float]:
    """Std (combined x/y) of candidate end positions across anchors, per query."""
    spreads = []
    for record in log.queries:
        if record.candidates is None:
            raise DataError("rollout was not run with keep_candidates=True")
        ends = np.array([
            simulate_chunk(record.base_state, denormalize(cand, stats))[-1]
            for cand in record.candidates
        ])
        spreads.append(float(np.sqrt(ends.var(axis=0).sum())))
    return spreads
