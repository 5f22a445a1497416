import json
import math

import numpy as np
import pytest

from anchordiff import cli
from anchordiff.errors import ConfigError
from anchordiff.harness import (RunConfig, ablation_chunk_sweep, candidate_spread_by_query,
                                config_from_file, episode_seed, evaluate,
                                export_trajectory_viz, rollout, sign_test,
                                write_metrics_csv)
from anchordiff.policy import AnchoredPolicy, GenerationResult, PolicyConfig
from anchordiff.residual import ResidualConfig, ResidualCorrector
from anchordiff.simenv import (ACTION_DIM, OBS_DIM, TASKS, EnvState, PlanarEnv,
                               expert_action)
from anchordiff.vocabulary import AnchorVocabulary, NormStats

IDENTITY_STATS = NormStats(lo=-np.ones(ACTION_DIM), hi=np.ones(ACTION_DIM))


def state_from_obs(task, obs):
    base = obs[0:2]
    return EnvState(
        task=task, x=float(obs[0]), y=float(obs[1]), theta=float(obs[2]),
        q1=float(obs[3]), q2=float(obs[4]), grip=float(obs[5]),
        target=obs[8:10] + base, obstacle_center=obs[10:12] + base,
        obstacle_radius=0.2, step=int(round(obs[12] * 200)),
    )


class ChunkPolicyAdapter:
    """Test double satisfying the rollout interface with a custom planner."""

    head_name = "l1"

    def __init__(self, task, horizon, plan_fn):
        self.task = task
        self.plan_fn = plan_fn
        self.stats = IDENTITY_STATS
        self.config = PolicyConfig(horizon=horizon)

    def encode_context(self, obs, task_id):
        return obs

    def generate_chunk(self, context, rng=None, **_ignored):
        return GenerationResult(chunk=self.plan_fn(context, rng), anchor=0,
                                scores=np.ones(1))


def expert_adapter(task, horizon, side=1):
    def plan(obs, rng):
        state = state_from_obs(task, obs)
        sim = PlanarEnv(task)
        sim.state = state.copy()
        actions = []
        for _ in range(horizon):
            action = expert_action(sim.state, side)
            actions.append(action)
            sim.step(action)
        return np.array(actions)

    return ChunkPolicyAdapter(task, horizon, plan)


def zero_adapter(task, horizon):
    return ChunkPolicyAdapter(task, horizon,
                              lambda obs, rng: np.zeros((horizon, ACTION_DIM)))


def random_adapter(task, horizon):
    return ChunkPolicyAdapter(task, horizon,
                              lambda obs, rng: rng.uniform(-1, 1, (horizon, ACTION_DIM)))


def tiny_anchored(horizon=2, m=3, seed=0):
    config = PolicyConfig(
        horizon=horizon, action_dim=ACTION_DIM, obs_dim=OBS_DIM, n_tasks=3,
        context_dim=8, time_embed_dim=4, encoder_hidden=(8,), trunk_hidden=(16, 16),
        seed=seed)
    anchors = np.random.default_rng(seed).uniform(-0.5, 0.5, (m, horizon, ACTION_DIM))
    vocab = AnchorVocabulary(anchors=anchors, stats=IDENTITY_STATS)
    return AnchoredPolicy(config, vocab)


def test_run_config_validation_and_disturbance():
    with pytest.raises(ConfigError):
        RunConfig(task="fly")
    with pytest.raises(ConfigError):
        RunConfig(horizon=3)
    with pytest.raises(ConfigError):
        RunConfig(head="transformer")
    dist = RunConfig(disturbance_kind="drift", disturbance_magnitude=0.2).disturbance()
    assert dist.kind == "drift" and dist.magnitude == 0.2


def test_config_from_file_json_and_keyvalue(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"task": "place", "horizon": 2, "eval_episodes": 7}))
    cfg = config_from_file(p)
    assert cfg.task == "place" and cfg.horizon == 2 and cfg.eval_episodes == 7
    p2 = tmp_path / "cfg.txt"
    p2.write_text("task = pick_detour\nhorizon = 10\nuse_residual = true\n"
                  "denoise_steps = none\nlearning_rate = 1e-3\n# comment\n")
    cfg2 = config_from_file(p2)
    assert cfg2.horizon == 10 and cfg2.use_residual is True
    assert cfg2.denoise_steps is None and cfg2.learning_rate == 1e-3
    p3 = tmp_path / "bad.txt"
    p3.write_text("nonsense_key = 4\n")
    with pytest.raises(ConfigError):
        config_from_file(p3)


def test_rollout_h1_queries_equal_steps():
    cfg = RunConfig(task="pick_detour", head="l1", horizon=1, eval_episodes=1, trials=1)
    policy = zero_adapter("pick_detour", 1)
    env = PlanarEnv("pick_detour")
    metrics, _ = rollout(policy, None, env, cfg, seed=3)
    assert metrics.queries == metrics.steps == 200
    assert not metrics.success


def test_rollout_failure_episode_query_count_at_h5():
    cfg = RunConfig(task="pick_detour", head="l1", horizon=5, eval_episodes=1, trials=1)
    metrics, _ = rollout(zero_adapter("pick_detour", 5), None,
                         PlanarEnv("pick_detour"), cfg, seed=3)
    assert metrics.steps == 200
    assert metrics.queries == 40  # ceil(200 / 5)


def test_rollout_query_accounting_invariant():
    cfg = RunConfig(task="pick_detour", head="l1", horizon=5, eval_episodes=1, trials=1)
    for seed in range(5):
        metrics, _ = rollout(expert_adapter("pick_detour", 5), None,
                             PlanarEnv("pick_detour"), cfg, seed=seed)
        assert metrics.queries == math.ceil(metrics.steps / 5)
        assert metrics.queries * 5 >= metrics.steps


def test_expert_oracle_policy_has_high_success():
    cfg = RunConfig(task="pick_detour", head="l1", horizon=5, eval_episodes=40, trials=1)
    summary, _, _ = evaluate(cfg, expert_adapter("pick_detour", 5))
    assert summary["success_mean"] >= 0.99


def test_random_policy_has_near_zero_success():
    cfg = RunConfig(task="pick_detour", head="l1", horizon=5, eval_episodes=40, trials=1)
    summary, _, _ = evaluate(cfg, random_adapter("pick_detour", 5))
    assert summary["success_mean"] <= 0.05


def test_zero_init_residual_is_bitwise_noop():
    cfg = RunConfig(task="pick_detour", head="anchored", horizon=2,
                    eval_episodes=1, trials=1, use_residual=True)
    policy = tiny_anchored(horizon=2)
    residual = ResidualCorrector(ResidualConfig(horizon=2))
    residual.zero_init()
    m_with, log_with = rollout(policy, residual, PlanarEnv("pick_detour"), cfg, seed=9)
    m_without, log_without = rollout(policy, None, PlanarEnv("pick_detour"), cfg, seed=9)
    assert m_with.success == m_without.success
    assert m_with.steps == m_without.steps
    assert len(log_with.actions) == len(log_without.actions)
    for a, b in zip(log_with.actions, log_without.actions):
        assert np.array_equal(a, b)
    for s, t in zip(log_with.states, log_without.states):
        assert s == t


def test_evaluate_writes_byte_identical_csv(tmp_path):
    cfg = RunConfig(task="pick_detour", head="anchored", horizon=2,
                    eval_episodes=3, trials=2, seed=4)
    policy = tiny_anchored(horizon=2, seed=1)
    evaluate(cfg, policy, out_dir=tmp_path / "a")
    evaluate(cfg, policy, out_dir=tmp_path / "b")
    csv_a = (tmp_path / "a" / "episodes.csv").read_bytes()
    csv_b = (tmp_path / "b" / "episodes.csv").read_bytes()
    assert csv_a == csv_b
    header = csv_a.decode().splitlines()[0]
    assert header == "trial,episode,seed,success,steps,queries,final_error,flops_per_episode"


def test_evaluate_seed_blocks_are_disjoint_across_trials():
    cfg = RunConfig(eval_episodes=50, trials=3, seed=2)
    seeds = {episode_seed(cfg, t, e) for t in range(3) for e in range(50)}
    assert len(seeds) == 150


def test_sign_test_matches_binomial_tail():
    # P(X >= 15), X ~ Binomial(20, 1/2) = 21700 / 2^20
    assert sign_test(15, 5) == pytest.approx(21700 / 2 ** 20, rel=1e-12)
    assert sign_test(0, 0) == 1.0
    assert sign_test(30, 0) < 1e-6


def test_viz_export_row_count_and_unique_chosen(tmp_path):
    cfg = RunConfig(task="pick_detour", head="anchored", horizon=2,
                    eval_episodes=2, trials=1, seed=3)
    policy = tiny_anchored(horizon=2, m=3)
    _, rows_metrics, logs = evaluate(cfg, policy, keep_candidates=True)
    path = tmp_path / "viz.csv"
    rows = export_trajectory_viz(logs, policy.vocab.stats, path)
    total_queries = sum(r["queries"] for r in rows_metrics)
    assert len(rows) == total_queries * 3 * 2  # queries x M x H
    by_query = {}
    for row in rows:
        key = (row["episode"], row["query"], row["step"])
        by_query.setdefault(key, 0)
        by_query[key] += row["chosen"]
    for key, chosen_count in by_query.items():
        assert chosen_count == 1
    assert path.exists()


def test_candidate_spread_nonnegative():
    cfg = RunConfig(task="pick_detour", head="anchored", horizon=2,
                    eval_episodes=1, trials=1)
    policy = tiny_anchored(horizon=2, m=4)
    _, _, logs = evaluate(cfg, policy, keep_candidates=True)
    spreads = candidate_spread_by_query(logs[0], policy.vocab.stats)
    assert len(spreads) == logs[0].queries.__len__()
    assert all(s >= 0.0 for s in spreads)


def test_chunk_sweep_flops_accounting():
    policies = {1: {"l1": zero_adapter("pick_detour", 1)},
                5: {"l1": zero_adapter("pick_detour", 5)}}
    cfg = RunConfig(task="pick_detour", head="l1", eval_episodes=2, trials=1)
    result = ablation_chunk_sweep(policies, cfg)
    by_h = {r["horizon"]: r for r in result["rows"]}
    assert by_h[1]["encoder_flops_per_episode"] == 5 * by_h[5]["encoder_flops_per_episode"]
    assert by_h[1]["queries_per_episode"] == 200
    assert by_h[5]["queries_per_episode"] == 40


def test_write_metrics_csv_formats_floats_repr(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv([{"a": 1, "b": 0.1 + 0.2}], path)
    assert path.read_text() == "a,b\n1,0.30000000000000004\n"


def test_cli_pipeline_smoke(tmp_path, capsys):
    data = tmp_path / "data.jsonl.gz"
    anchors = tmp_path / "anchors.anvc"
    out = tmp_path / "policy"
    assert cli.main(["gen-data", "--task", "pick_detour", "--episodes", "12",
                     "--seed", "0", "--out", str(data)]) == 0
    assert cli.main(["build-anchors", "--dataset", str(data), "--horizon", "2",
                     "--clusters", "4", "--seed", "0", "--out", str(anchors)]) == 0
    assert cli.main(["train", "--task", "pick_detour", "--head", "anchored",
                     "--dataset", str(data), "--anchors", str(anchors),
                     "--chunks", "2", "--steps", "20", "--seed", "0",
                     "--out", str(out)]) == 0
    assert (out / "params.anvp").exists()
    assert (out / "train_log.jsonl").exists()
    eval_dir = tmp_path / "eval"
    assert cli.main(["eval", "--policy", str(out), "--task", "pick_detour",
                     "--episodes", "2", "--trials", "1", "--seed", "0",
                     "--out", str(eval_dir)]) == 0
    assert (eval_dir / "episodes.csv").exists()
    assert (eval_dir / "summary.json").exists()
    viz = tmp_path / "viz.csv"
    assert cli.main(["viz-export", "--policy", str(out), "--task", "pick_detour",
                     "--episodes", "1", "--seed", "0", "--out", str(viz)]) == 0
    assert viz.exists()
    capsys.readouterr()


def test_cli_failure_emits_error_json(tmp_path, capsys):
    rc = cli.main(["build-anchors", "--dataset", str(tmp_path / "missing.jsonl"),
                   "--out", str(tmp_path / "x.anvc")])
    assert rc == 1
    err = capsys.readouterr().err
    payload = json.loads(err.strip().splitlines()[-1])
    assert "error" in payload and "message" in payload
