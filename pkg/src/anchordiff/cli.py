"""Command-line entry points for dataset generation, anchor building,
training, evaluation, ablations, and trajectory export."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from . import harness, pipeline, policy as policy_mod, residual as residual_mod, simenv
from . import vocabulary as vocab_mod
from .harness import RunConfig, config_from_file
from .policy import PolicyConfig


def _policy_config(args, head: str) -> PolicyConfig:
    return PolicyConfig(
        horizon=args.chunks,
        truncation=1.0 if head == "from_noise_diffusion" else args.truncation,
        score_weight=args.score_weight,
        learning_rate=args.lr,
        batch_size=args.batch,
        seed=args.seed,
    )


def cmd_gen_data(args) -> None:
    summary = simenv.generate_dataset(args.task, args.episodes, args.seed, args.out)
    print(json.dumps(summary))


def cmd_build_anchors(args) -> None:
    episodes = simenv.load_dataset(args.dataset)
    vocab, coverage = pipeline.build_vocabulary(
        episodes, args.horizon, args.clusters, args.seed, max_fit_points=args.max_fit)
    vocab_mod.vocab_save(vocab, args.out)
    print(json.dumps(coverage))


def cmd_train(args) -> None:
    episodes = simenv.load_dataset(args.dataset)
    vocab = vocab_mod.vocab_load(args.anchors, expect_dim=simenv.ACTION_DIM)
    if vocab.horizon != args.chunks:
        episodes_vocab, coverage = pipeline.build_vocabulary(
            episodes, args.chunks, vocab.m, args.seed)
        vocab = episodes_vocab
    cfg = _policy_config(args, args.head)
    os.makedirs(args.out, exist_ok=True)
    trained = pipeline.train_head(
        args.head, episodes, vocab, cfg, args.steps, args.seed,
        log_path=os.path.join(args.out, "train_log.jsonl"))
    trained.save(args.out)
    print(json.dumps({"out": args.out, "params": trained.store.n_params()}))


def cmd_train_residual(args) -> None:
    policy = policy_mod.load_policy(args.policy)
    dist = simenv.DisturbanceConfig(kind=args.dist_kind, magnitude=args.dist_magnitude,
                                    seed=args.seed)
    corrector, loss, n = pipeline.train_residual_for_policy(
        policy, args.task, args.episodes, args.seed, dist, steps=args.steps)
    os.makedirs(args.out, exist_ok=True)
    corrector.save(args.out)
    print(json.dumps({"out": args.out, "final_loss": loss, "samples": n}))


def _run_config(args) -> RunConfig:
    if args.config:
        return config_from_file(args.config)
    return RunConfig(task=args.task, horizon=args.chunks, seed=args.seed,
                     eval_episodes=args.episodes, trials=args.trials,
                     disturbance_kind=args.dist_kind,
                     disturbance_magnitude=args.dist_magnitude)


def cmd_eval(args) -> None:
    policy = policy_mod.load_policy(args.policy)
    corrector = residual_mod.load_residual(args.residual) if args.residual else None
    cfg = _run_config(args)
    cfg = replace(cfg, head=policy.head_name, horizon=policy.config.horizon,
                  use_residual=corrector is not None)
    summary, _, _ = harness.evaluate(cfg, policy, corrector, out_dir=args.out)
    print(json.dumps({"success_mean": summary["success_mean"],
                      "success_std": summary["success_std"],
                      "out": args.out}))


def cmd_ablate(args) -> None:
    cfg = config_from_file(args.config) if args.config else RunConfig(
        task=args.task, seed=args.seed, eval_episodes=args.episodes, trials=1)
    if args.which == "denoise":
        anchored = policy_mod.load_policy(args.policy)
        from_noise = policy_mod.load_policy(args.baseline)
        result = harness.ablation_denoise_budget(anchored, from_noise, cfg, out_dir=args.out)
        print(json.dumps(result["rows"]))
    elif args.which == "residual":
        anchored = policy_mod.load_policy(args.policy)
        corrector = residual_mod.load_residual(args.residual)
        cfg = replace(cfg, horizon=anchored.config.horizon,
                      disturbance_kind=args.dist_kind,
                      disturbance_magnitude=args.dist_magnitude)
        result = harness.ablation_residual(anchored, corrector, cfg, out_dir=args.out)
        print(json.dumps(result["rows"]))
    else:  # chunks
        policies = {}
        for spec in args.policies:
            head_dir = policy_mod.load_policy(spec)
            h = head_dir.config.horizon
            policies.setdefault(h, {})[head_dir.head_name] = head_dir
        result = harness.ablation_chunk_sweep(policies, cfg, out_dir=args.out)
        print(json.dumps(result["rows"]))


def cmd_viz_export(args) -> None:
    policy = policy_mod.load_policy(args.policy)
    cfg = RunConfig(task=args.task, head=policy.head_name,
                    horizon=policy.config.horizon, seed=args.seed,
                    eval_episodes=args.episodes, trials=1)
    _, _, logs = harness.evaluate(cfg, policy, keep_candidates=True)
    rows = harness.export_trajectory_viz(logs, policy.vocab.stats, args.out)
    print(json.dumps({"rows": len(rows), "out": args.out}))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anchordiff")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an expert demonstration dataset")
    p.add_argument("--task", required=True, choices=simenv.TASKS)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-anchors", help="fit the trajectory vocabulary")
    p.add_argument("--dataset", required=True)
    p.add_argument("--horizon", type=int, default=5)
    p.add_argument("--clusters", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-fit", dest="max_fit", type=int, default=20000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_anchors)

    p = sub.add_parser("train", help="train an action head")
    p.add_argument("--task", required=True, choices=simenv.TASKS)
    p.add_argument("--head", required=True,
                   choices=("anchored", "l1", "from_noise_diffusion"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--chunks", type=int, default=5)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--truncation", type=float, default=0.2)
    p.add_argument("--score-weight", dest="score_weight", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-residual", help="train the residual corrector")
    p.add_argument("--policy", required=True)
    p.add_argument("--task", required=True, choices=simenv.TASKS)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--steps", type=int, default=2500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dist-kind", dest="dist_kind", default="drift")
    p.add_argument("--dist-magnitude", dest="dist_magnitude", type=float, default=0.12)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_residual)

    p = sub.add_parser("eval", help="closed-loop evaluation")
    p.add_argument("--policy", required=True)
    p.add_argument("--residual", default=None)
    p.add_argument("--task", default="pick_detour", choices=simenv.TASKS)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chunks", type=int, default=5)
    p.add_argument("--dist-kind", dest="dist_kind", default="none")
    p.add_argument("--dist-magnitude", dest="dist_magnitude", type=float, default=0.0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a benchmark ablation")
    p.add_argument("which", choices=("denoise", "chunks", "residual"))
    p.add_argument("--policy", default=None)
    p.add_argument("--baseline", default=None)
    p.add_argument("--residual", default=None)
    p.add_argument("--policies", nargs="*", default=[])
    p.add_argument("--task", default="pick_detour", choices=simenv.TASKS)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dist-kind", dest="dist_kind", default="drift")
    p.add_argument("--dist-magnitude", dest="dist_magnitude", type=float, default=0.12)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("viz-export", help="export per-query candidate chunks")
    p.add_argument("--policy", required=True)
    p.add_argument("--task", default="pick_detour", choices=simenv.TASKS)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
