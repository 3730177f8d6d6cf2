"""Experiment orchestration: seed fans, arm wiring, report emission.

A run directory ends up containing, per seed, the offline dataset, the
pretrained critic/recovery checkpoints, the online training trace, and a
metrics CSV; plus aggregate metrics, a learning-curve SVG and a JSON summary
at the top level.
"""

from __future__ import annotations

import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .core import TransitionBatch
from .envs import (CarBrakeEnv, GridHazardEnv, PointMomentumEnv,
                   carbrake_conservative_index, tabularize)
from .metrics import MetricsReport, evaluate
from .online import (OracleShield, QLearnSettings, SacLearner, SacSettings, Shield,
                     TabularQLearner, TrainTrace, train_online)
from .oracle import certify_theorem2, value_iteration_optimal, write_oracle_report
from .plots import ablation_figure, learning_curves_figure
from .pretrain import (OfflineDataset, PretrainSettings, RecoveryPolicy, SafetyCritic,
                       collect_offline, filter_pre_violation, pretrain_method,
                       uniform_box_policy, uniform_discrete_policy, write_pretrain_report,
                       PROVENANCE_REPLAY)


def build_env(config: ExperimentConfig):
    env_cfg = config.environment
    kwargs = {"gamma": config.gamma, "gamma_safe": config.gamma_safe}
    if env_cfg.horizon is not None:
        kwargs["horizon"] = env_cfg.horizon
    if env_cfg.id == "car_brake":
        return CarBrakeEnv(**kwargs)
    if env_cfg.id == "grid_hazard":
        return GridHazardEnv(**kwargs)
    if env_cfg.id == "point_momentum":
        if env_cfg.hazard_radius is not None:
            kwargs["hazard_radius"] = env_cfg.hazard_radius
        return PointMomentumEnv(drift=env_cfg.drift, **kwargs)
    raise ConfigError(f"unknown environment id {env_cfg.id!r}")


def env_oracle(env, gamma_safe: float):
    """Exact values for tabularizable environments, else None."""
    if isinstance(env, (GridHazardEnv, CarBrakeEnv)):
        tab = tabularize(env)
        return tab, value_iteration_optimal(tab, gamma_safe)
    return None


def resolve_epsilon(config: ExperimentConfig, env) -> float:
    """'auto' means the boundary value gamma_safe ** h_dead from the oracle."""
    if config.epsilon_safe != "auto":
        return float(config.epsilon_safe)
    pair = env_oracle(env, config.gamma_safe)
    if pair is None:
        raise ConfigError("epsilon_safe='auto' needs a tabularizable environment; "
                          "give a numeric threshold for point_momentum")
    _, values = pair
    epsilon = config.gamma_safe ** values.h_dead
    if env.stochastic:
        epsilon *= 0.5  # tighter under uncertainty
    return float(epsilon)


def make_learner(env, config: ExperimentConfig, seed: int):
    if isinstance(env, GridHazardEnv):
        settings = QLearnSettings(alpha=config.qlearn_alpha, gamma=config.gamma,
                                  eps_decay_steps=max(1000, config.n_online // 2))
        return TabularQLearner(env.SIZE * env.SIZE, 4, env.state_index, settings, seed=seed)
    settings = SacSettings(hidden=config.network.hidden, activation=config.network.activation,
                           gamma=config.gamma, start_steps=config.sac_start_steps)
    return SacLearner(env.spec.state_dim, env.spec.action_dim, env.spec.action_low,
                      env.spec.action_high, env.state_scale, settings, seed=seed)


def make_task_policy_sampler(env):
    """The 'untrained task policy' used by the baseline critic: uniform actions."""
    if env.discrete_actions is not None:
        return uniform_discrete_policy(env.discrete_actions)
    return uniform_box_policy(env.spec.action_low, env.spec.action_high)


def make_oracle_shield(env, gamma_safe: float, epsilon: float | str = "auto") -> OracleShield:
    pair = env_oracle(env, gamma_safe)
    if pair is None:
        raise ConfigError(f"no exact model for {type(env).__name__}")
    tab, values = pair
    if epsilon == "auto":
        epsilon = gamma_safe ** values.h_dead
    if isinstance(env, GridHazardEnv):
        return OracleShield(tab, values, epsilon, env.state_index)
    actions = env.TABULAR_ACTIONS

    def index_of_action(a) -> int:
        return int(np.argmin(np.abs(actions[:, 0] - float(np.asarray(a).reshape(-1)[0]))))

    return OracleShield(tab, values, epsilon, carbrake_conservative_index,
                        native_of_action=lambda ai: actions[ai].copy(),
                        index_of_action=index_of_action)


def load_learner(path, env):
    """Load whichever learner checkpoint lives at ``path``."""
    with np.load(path) as data:
        kind = str(data["kind"]) if "kind" in data.files else "sac"
    if kind == "qlearn":
        if not isinstance(env, GridHazardEnv):
            raise ConfigError("tabular learner checkpoint needs a grid environment")
        return TabularQLearner.load(path, env.state_index)
    return SacLearner.load(path)


def load_shield(seed_dir: Path, epsilon: float, env) -> Shield:
    """Rebuild a shield from critic/recovery checkpoints in a seed directory."""
    seed_dir = Path(seed_dir)
    critic = SafetyCritic.load(seed_dir / "critic.npz")
    recovery = RecoveryPolicy.load(seed_dir / "recovery.npz")
    return Shield(critic, recovery, epsilon, discrete_actions=env.discrete_actions)


def pretrain_settings(config: ExperimentConfig) -> PretrainSettings:
    return PretrainSettings(
        n_steps=config.n_pretrain, batch_size=config.pretrain_batch_size,
        hidden=config.network.hidden, activation=config.network.activation,
        lr=config.pretrain_lr, expectile_tau=config.expectile_tau,
        gamma_safe=config.gamma_safe)


def build_offline_dataset(env, config: ExperimentConfig, seed: int) -> OfflineDataset:
    """Random rollouts plus transitions harvested from an unshielded learner.

    The replay-provenance half is the trace of a task learner training
    without a shield, which is exactly the kind of data a replay buffer
    holds: early random flailing, later near-on-policy behavior, failures
    included.
    """
    parts = []
    if config.dataset.n_random > 0:
        parts.append(collect_offline(env, None, n_random=config.dataset.n_random,
                                     seed=seed * 9973 + 11))
    if config.dataset.n_replay > 0:
        learner = make_learner(env, config, seed=seed * 9973 + 23)
        result = train_online(env, None, learner, n_steps=config.dataset.n_replay,
                              seed=seed * 9973 + 37, keep_transitions=True)
        parts.append(dataset_from_batch(result.transitions, PROVENANCE_REPLAY))
    if not parts:
        raise ConfigError("dataset config requests no transitions")
    return merge_datasets(*parts)


def dataset_from_batch(batch: TransitionBatch, tag: str) -> OfflineDataset:
    """Wrap raw transitions as an offline dataset with one provenance tag."""
    provenance = {int(eid): tag for eid in np.unique(batch.episode_ids)}
    return OfflineDataset(batch, provenance)


def merge_datasets(*datasets: OfflineDataset) -> OfflineDataset:
    """Concatenate datasets, renumbering episodes to stay unique."""
    if not datasets:
        raise ValueError("nothing to merge")
    batches = []
    provenance = {}
    offset = 0
    for ds in datasets:
        ids = ds.batch.episode_ids
        remap = {int(old): offset + i for i, old in enumerate(np.unique(ids))}
        new_ids = np.array([remap[int(e)] for e in ids], dtype=np.int64)
        b = ds.batch
        batches.append(TransitionBatch(b.states, b.proposed_actions, b.executed_actions,
                                       b.next_states, b.rewards, b.costs, b.dones,
                                       b.corrected, new_ids))
        provenance.update({new: ds.provenance[old] for old, new in remap.items()})
        offset += len(remap)
    return OfflineDataset(TransitionBatch.concatenate(batches), provenance)


@dataclass
class SeedArtifacts:
    seed: int
    metrics_row: dict
    trace_path: Path
    critic_path: Path | None
    recovery_path: Path | None
    dataset_path: Path | None


def run_seed(config: ExperimentConfig, seed: int, out_dir: Path,
             force: bool = False) -> SeedArtifacts:
    """Full pipeline for one seed: data, pretraining, online training, eval."""
    out_dir = Path(out_dir)
    seed_dir = out_dir / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    env = build_env(config)
    epsilon = resolve_epsilon(config, env)

    dataset_path = critic_path = recovery_path = None
    shield = None
    if config.method != "unshielded":
        dataset_path = seed_dir / "dataset.npz"
        if dataset_path.exists() and not force:
            dataset = OfflineDataset.load(dataset_path)
        else:
            dataset = build_offline_dataset(env, config, seed)
            dataset.save(dataset_path)
        dataset = filter_pre_violation(dataset, config.dataset.pre_violation_keep)

        critic_path = seed_dir / "critic.npz"
        recovery_path = seed_dir / "recovery.npz"
        if critic_path.exists() and recovery_path.exists() and not force:
            critic = SafetyCritic.load(critic_path)
            recovery = RecoveryPolicy.load(recovery_path)
        else:
            task_policy = make_task_policy_sampler(env) if config.method == "rrl" else None
            result = pretrain_method(dataset, config.method, pretrain_settings(config),
                                     env.state_scale, env.spec.action_low,
                                     env.spec.action_high, seed=seed,
                                     task_policy=task_policy)
            critic, recovery = result.critic, result.policy
            critic.save(critic_path, {"method": config.method, "seed": seed})
            recovery.save(recovery_path, {"method": config.method, "seed": seed})
            write_pretrain_report(seed_dir / "pretrain_report.csv", result.report)
        shield = Shield(critic, recovery, epsilon, discrete_actions=env.discrete_actions)

    learner = make_learner(env, config, seed)
    online = train_online(env, shield, learner, config.n_online, seed=seed,
                          update_ratio=config.update_ratio)
    trace_path = seed_dir / "trace.csv"
    online.trace.to_csv(trace_path)
    learner.save(seed_dir / "learner.npz")

    eval_report = evaluate(learner, shield, env, config.eval_episodes, seed=seed + 99_991)
    row = {
        "seed": seed,
        "acr": eval_report.acr,
        "avr": eval_report.avr,
        "tv": online.trace.total_violations,
        "arr": online.trace.corrected_ratio,
        "arr_eval": eval_report.arr,
        "episode_len_mean": eval_report.episode_len_mean,
        "n_episodes": eval_report.n_episodes,
        "epsilon": epsilon,
    }
    MetricsReport(acr=row["acr"], avr=row["avr"], tv=row["tv"], arr=row["arr"],
                  episode_len_mean=row["episode_len_mean"],
                  n_episodes=row["n_episodes"]).to_csv(seed_dir / "metrics.csv")
    return SeedArtifacts(seed=seed, metrics_row=row, trace_path=trace_path,
                         critic_path=critic_path, recovery_path=recovery_path,
                         dataset_path=dataset_path)


def _seed_worker(config_json: str, seed: int, out_dir: str) -> dict:
    config = ExperimentConfig.from_dict(json.loads(config_json))
    artifacts = run_seed(config, seed, Path(out_dir))
    return {"row": artifacts.metrics_row, "trace_path": str(artifacts.trace_path)}


def config_to_dict(config: ExperimentConfig) -> dict:
    env = {"id": config.environment.id}
    if config.environment.horizon is not None:
        env["horizon"] = config.environment.horizon
    if config.environment.id == "point_momentum":
        env["drift"] = config.environment.drift
        if config.environment.hazard_radius is not None:
            env["hazard_radius"] = config.environment.hazard_radius
    return {
        "environment": env,
        "method": config.method,
        "seeds": list(config.seeds),
        "dataset": {"n_random": config.dataset.n_random, "n_replay": config.dataset.n_replay,
                    "pre_violation_keep": config.dataset.pre_violation_keep},
        "n_pretrain": config.n_pretrain,
        "n_online": config.n_online,
        "epsilon_safe": config.epsilon_safe,
        "gamma": config.gamma,
        "gamma_safe": config.gamma_safe,
        "expectile_tau": config.expectile_tau,
        "output_dir": config.output_dir,
        "network": {"hidden": list(config.network.hidden),
                    "activation": config.network.activation},
        "eval_episodes": config.eval_episodes,
        "pretrain_batch_size": config.pretrain_batch_size,
        "pretrain_lr": config.pretrain_lr,
        "update_ratio": config.update_ratio,
        "sac_start_steps": config.sac_start_steps,
        "qlearn_alpha": config.qlearn_alpha,
        "ablation_epsilons": list(config.ablation_epsilons),
        "workers": config.workers,
    }


@dataclass
class ExperimentResult:
    report: MetricsReport | None
    failures: list[dict]
    out_dir: Path
    trace_paths: list[Path] = field(default_factory=list)
    figure_path: Path | None = None

    @property
    def ok(self) -> bool:
        return not self.failures and self.report is not None


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run every seed of one arm, aggregate metrics, render the curve figure.

    A seed failure is recorded and the run continues; the result is marked
    not-ok so the CLI can exit nonzero.
    """
    out_dir = config.resolve_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config_to_dict(config), indent=2))

    rows, failures, trace_paths = [], [], []
    if config.workers > 1:
        payload = json.dumps(config_to_dict(config))
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = {seed: pool.submit(_seed_worker, payload, seed, str(out_dir))
                       for seed in config.seeds}
            for seed, future in futures.items():
                try:
                    result = future.result()
                    rows.append(result["row"])
                    trace_paths.append(Path(result["trace_path"]))
                except Exception as exc:  # noqa: BLE001 - recorded, run continues
                    failures.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
    else:
        for seed in config.seeds:
            try:
                artifacts = run_seed(config, seed, out_dir)
                rows.append(artifacts.metrics_row)
                trace_paths.append(artifacts.trace_path)
            except Exception as exc:  # noqa: BLE001
                failures.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}",
                                 "traceback": traceback.format_exc()})

    report = None
    figure_path = None
    if rows:
        report = MetricsReport.from_seed_rows(rows)
        report.to_csv(out_dir / "metrics.csv")
        traces = [TrainTrace.from_csv(p) for p in trace_paths]
        figure_path = learning_curves_figure({config.method: traces}, out_dir / "curves.svg")
    summary = {"method": config.method, "rows": rows, "failures": failures,
               "epsilon_safe": config.epsilon_safe}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return ExperimentResult(report=report, failures=failures, out_dir=out_dir,
                            trace_paths=trace_paths, figure_path=figure_path)


def plug_and_play_eval(shield, policy, env, n_episodes: int, seed: int = 0) -> dict:
    """Attach an independently pretrained shield to an external policy.

    Returns the shielded and unshielded metric reports for the same policy
    plus the relative change in violation rate and return.
    """
    if isinstance(shield, Shield):
        expected = env.spec.state_dim + env.spec.action_dim
        if shield.critic.q_net.in_dim != expected:
            raise ValueError(
                f"shield expects input dim {shield.critic.q_net.in_dim}, "
                f"environment provides {expected}")
    plain = evaluate(policy, None, env, n_episodes, seed=seed)
    shielded = evaluate(policy, shield, env, n_episodes, seed=seed)
    avr_drop = ((plain.avr - shielded.avr) / plain.avr) if plain.avr > 0 else 0.0
    acr_drop = ((plain.acr - shielded.acr) / abs(plain.acr)) if plain.acr != 0 else 0.0
    return {"unshielded": plain, "shielded": shielded,
            "avr_relative_drop": float(avr_drop), "acr_relative_drop": float(acr_drop)}


def ablation_grid(config: ExperimentConfig, epsilon_values) -> dict:
    """RRL vs DEA arms across a threshold grid; pretraining is shared per
    (method, seed) since the critic does not depend on the threshold."""
    epsilon_values = [float(e) for e in epsilon_values]
    if len(epsilon_values) < 2:
        raise ConfigError("ablation needs at least two epsilon values")
    out_dir = config.resolve_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    env = build_env(config)
    rows = []
    for method in ("dea_rrl", "rrl"):
        for seed in config.seeds:
            dataset = filter_pre_violation(
                build_offline_dataset(env, config, seed), config.dataset.pre_violation_keep)
            task_policy = make_task_policy_sampler(env) if method == "rrl" else None
            result = pretrain_method(dataset, method, pretrain_settings(config),
                                     env.state_scale, env.spec.action_low,
                                     env.spec.action_high, seed=seed, task_policy=task_policy)
            for epsilon in epsilon_values:
                shield = Shield(result.critic, result.policy, epsilon,
                                discrete_actions=env.discrete_actions)
                learner = make_learner(env, config, seed)
                online = train_online(env, shield, learner, config.n_online, seed=seed,
                                      update_ratio=config.update_ratio)
                eval_report = evaluate(learner, shield, env, config.eval_episodes,
                                       seed=seed + 99_991)
                rows.append({"method": method, "epsilon": epsilon, "seed": seed,
                             "acr": eval_report.acr, "avr": eval_report.avr,
                             "tv": online.trace.total_violations,
                             "arr": online.trace.corrected_ratio,
                             "arr_eval": eval_report.arr})
    means = []
    for method in ("dea_rrl", "rrl"):
        for epsilon in epsilon_values:
            sub = [r for r in rows if r["method"] == method and r["epsilon"] == epsilon]
            means.append({"method": method, "epsilon": epsilon,
                          "acr": float(np.mean([r["acr"] for r in sub])),
                          "avr": float(np.mean([r["avr"] for r in sub])),
                          "arr": float(np.mean([r["arr"] for r in sub])),
                          "tv": int(np.sum([r["tv"] for r in sub]))})
    csv_path = out_dir / "ablation.csv"
    _write_dict_rows(csv_path, means + rows)
    figure = ablation_figure(means, out_dir / "ablation.svg")
    return {"rows": rows, "means": means, "csv_path": csv_path, "figure_path": figure}


def _write_dict_rows(path: Path, rows: list[dict]) -> None:
    import csv as _csv

    keys = []
    for row in rows:
        for key in row:
            if key not in keys:
                keys.append(key)
    with Path(path).open("w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def oracle_certification(config: ExperimentConfig, out_dir: Path | None = None) -> dict:
    """Exact analysis for the configured environment: labels, values, shield
    soundness at the boundary threshold.  Writes the per-state CSV plus a
    plain-text summary."""
    env = build_env(config)
    pair = env_oracle(env, config.gamma_safe)
    if pair is None:
        raise ConfigError(f"environment {config.environment.id!r} has no exact model")
    tab, values = pair
    epsilon = config.gamma_safe ** values.h_dead
    report = certify_theorem2(tab, values, epsilon)
    out_dir = Path(out_dir) if out_dir is not None else config.resolve_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = write_oracle_report(tab, values, out_dir / "oracle.csv")
    summary_path = out_dir / "oracle_summary.txt"
    summary_path.write_text(report.summary() + "\n")
    return {"tab": tab, "values": values, "report": report,
            "csv_path": csv_path, "summary_path": summary_path}
