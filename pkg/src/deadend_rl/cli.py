"""Command-line entry points.

Every subcommand takes ``--config`` (JSON experiment file), an optional
``--seed`` restricting the run to one seed, and an optional ``--out``
overriding the output directory.  Exit status is 0 only when everything
completed and the command's hard checks passed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .metrics import evaluate
from .pretrain import filter_pre_violation, pretrain_method, write_pretrain_report
from .runner import (ablation_grid, build_env, build_offline_dataset, load_learner,
                     load_shield, make_task_policy_sampler, oracle_certification,
                     plug_and_play_eval, pretrain_settings, resolve_epsilon,
                     run_experiment, run_seed)


def _load(args) -> ExperimentConfig:
    config = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    if args.out is not None:
        overrides["output_dir"] = args.out
    return config.with_overrides(**overrides) if overrides else config


def _cmd_collect(args) -> int:
    config = _load(args)
    out = config.resolve_output_dir()
    for seed in config.seeds:
        env = build_env(config)
        dataset = build_offline_dataset(env, config, seed)
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        path = dataset.save(seed_dir / "dataset.npz")
        dataset.batch.write_csv(seed_dir / "dataset.csv")
        counts = dataset.provenance_counts()
        print(f"seed {seed}: {len(dataset)} transitions "
              f"({counts}) -> {path}")
    return 0


def _cmd_pretrain(args) -> int:
    config = _load(args)
    if config.method == "unshielded":
        print("method 'unshielded' has no pretraining stage", file=sys.stderr)
        return 1
    out = config.resolve_output_dir()
    for seed in config.seeds:
        env = build_env(config)
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        dataset_path = seed_dir / "dataset.npz"
        if dataset_path.exists():
            from .pretrain import OfflineDataset
            dataset = OfflineDataset.load(dataset_path)
        else:
            dataset = build_offline_dataset(env, config, seed)
            dataset.save(dataset_path)
        dataset = filter_pre_violation(dataset, config.dataset.pre_violation_keep)
        task_policy = make_task_policy_sampler(env) if config.method == "rrl" else None
        result = pretrain_method(dataset, config.method, pretrain_settings(config),
                                 env.state_scale, env.spec.action_low, env.spec.action_high,
                                 seed=seed, task_policy=task_policy)
        result.critic.save(seed_dir / "critic.npz", {"method": config.method, "seed": seed})
        result.policy.save(seed_dir / "recovery.npz", {"method": config.method, "seed": seed})
        write_pretrain_report(seed_dir / "pretrain_report.csv", result.report)
        last = result.report[-1] if result.report else {}
        print(f"seed {seed}: pretrained {config.method} "
              f"(final losses: {json.dumps(last)})")
    return 0


def _cmd_train(args) -> int:
    config = _load(args)
    result = run_experiment(config)
    if result.report is not None:
        r = result.report
        print(f"{config.method}: ACR={r.acr:.3f} AVR={r.avr:.3f} TV={r.tv} ARR={r.arr:.3f}")
    for failure in result.failures:
        print(f"seed {failure['seed']} FAILED: {failure['error']}", file=sys.stderr)
    return 0 if result.ok else 1


def _cmd_evaluate(args) -> int:
    config = _load(args)
    out = config.resolve_output_dir()
    failures = 0
    for seed in config.seeds:
        env = build_env(config)
        seed_dir = out / f"seed_{seed}"
        learner_path = seed_dir / "learner.npz"
        if not learner_path.exists():
            print(f"seed {seed}: no learner checkpoint at {learner_path}", file=sys.stderr)
            failures += 1
            continue
        learner = load_learner(learner_path, env)
        shield = None
        if config.method != "unshielded" and (seed_dir / "critic.npz").exists():
            shield = load_shield(seed_dir, resolve_epsilon(config, env), env)
        report = evaluate(learner, shield, env, config.eval_episodes, seed=seed + 99_991)
        report.to_csv(seed_dir / "metrics.csv")
        print(f"seed {seed}: ACR={report.acr:.3f} AVR={report.avr:.3f} ARR={report.arr:.3f}")
    return 0 if failures == 0 else 1


def _cmd_oracle(args) -> int:
    config = _load(args)
    result = oracle_certification(config, config.resolve_output_dir())
    print(result["report"].summary())
    print(f"per-state table: {result['csv_path']}")
    return 0 if result["report"].passed else 1


def _cmd_ablate(args) -> int:
    config = _load(args)
    epsilons = ([float(e) for e in args.epsilons.split(",")] if args.epsilons
                else config.ablation_epsilons)
    result = ablation_grid(config, epsilons)
    for row in result["means"]:
        print(f"{row['method']:10s} eps={row['epsilon']:.3f} "
              f"ACR={row['acr']:.3f} AVR={row['avr']:.3f} ARR={row['arr']:.3f}")
    print(f"table: {result['csv_path']}  figure: {result['figure_path']}")
    return 0


def _cmd_plug(args) -> int:
    config = _load(args)
    env = build_env(config)
    epsilon = resolve_epsilon(config, env)
    shield = load_shield(Path(args.shield_dir), epsilon, env)
    policy = load_learner(Path(args.policy_dir) / "learner.npz", env)
    result = plug_and_play_eval(shield, policy, env, config.eval_episodes, seed=config.seeds[0])
    plain, shielded = result["unshielded"], result["shielded"]
    print(f"unshielded: ACR={plain.acr:.3f} AVR={plain.avr:.3f}")
    print(f"shielded  : ACR={shielded.acr:.3f} AVR={shielded.avr:.3f} ARR={shielded.arr:.3f}")
    print(f"AVR relative drop: {result['avr_relative_drop']:.1%}  "
          f"ACR relative drop: {result['acr_relative_drop']:.1%}")
    out = config.resolve_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    with (out / "plug.json").open("w") as fh:
        json.dump({"avr_relative_drop": result["avr_relative_drop"],
                   "acr_relative_drop": result["acr_relative_drop"],
                   "unshielded": {"acr": plain.acr, "avr": plain.avr},
                   "shielded": {"acr": shielded.acr, "avr": shielded.avr,
                                "arr": shielded.arr}}, fh, indent=2)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deadend-rl",
                                     description="shielded safe-RL experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "collect": (_cmd_collect, "gather an offline dataset"),
        "pretrain": (_cmd_pretrain, "train the safety critic and recovery policy offline"),
        "train": (_cmd_train, "full pipeline: data, pretraining, shielded online training"),
        "evaluate": (_cmd_evaluate, "evaluate stored checkpoints"),
        "oracle": (_cmd_oracle, "exact analysis and shield certification"),
        "ablate": (_cmd_ablate, "threshold grid over the rrl/dea arms"),
        "plug": (_cmd_plug, "attach a pretrained shield to an external policy"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="restrict to one seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if name == "ablate":
            p.add_argument("--epsilons", default=None,
                           help="comma-separated threshold grid (default: config)")
        if name == "plug":
            p.add_argument("--shield-dir", required=True,
                           help="seed directory holding critic.npz / recovery.npz")
            p.add_argument("--policy-dir", required=True,
                           help="seed directory holding learner.npz")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
