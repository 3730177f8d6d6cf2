"""Experiment configuration: strict key-value files, fail-loud parsing.

Configs are JSON objects.  Unknown keys are rejected anywhere in the tree so
a typo cannot silently fall back to a default.  ``DEADEND_RL_OUT`` overrides
the root under which relative output directories are created.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

OUTPUT_ROOT_ENV = "DEADEND_RL_OUT"

METHODS = ("dea_rrl", "rrl", "rrl_msdp", "dearrl_iql", "unshielded")
ENV_IDS = ("car_brake", "grid_hazard", "point_momentum")


class ConfigError(ValueError):
    pass


def _take(raw: dict, where: str, required: dict, optional: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    unknown = set(raw) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(raw)
    if missing:
        raise ConfigError(f"{where}: missing required keys {sorted(missing)}")
    out = {}
    for key, conv in required.items():
        out[key] = conv(raw[key])
    for key, conv in optional.items():
        out[key] = conv(raw[key]) if key in raw else None
    return out


def _as_float(x) -> float:
    return float(x)


def _as_int(x) -> int:
    if isinstance(x, bool) or int(x) != x:
        raise ConfigError(f"expected an integer, got {x!r}")
    return int(x)


def _as_bool(x) -> bool:
    if not isinstance(x, bool):
        raise ConfigError(f"expected a boolean, got {x!r}")
    return x


def _as_str(x) -> str:
    if not isinstance(x, str):
        raise ConfigError(f"expected a string, got {x!r}")
    return x


def _as_hidden(x) -> tuple:
    if not isinstance(x, list) or not x or not all(isinstance(v, int) and v > 0 for v in x):
        raise ConfigError(f"hidden sizes must be a non-empty list of positive ints, got {x!r}")
    return tuple(x)


@dataclass(frozen=True)
class EnvironmentConfig:
    id: str
    horizon: int | None = None
    drift: bool = False
    hazard_radius: float | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "EnvironmentConfig":
        fields = _take(raw, "environment", {"id": _as_str},
                       {"horizon": _as_int, "drift": _as_bool, "hazard_radius": _as_float})
        if fields["id"] not in ENV_IDS:
            raise ConfigError(f"environment.id must be one of {ENV_IDS}, got {fields['id']!r}")
        if fields["id"] != "point_momentum" and (fields["drift"] or fields["hazard_radius"] is not None):
            raise ConfigError("drift/hazard_radius only apply to point_momentum")
        return cls(id=fields["id"], horizon=fields["horizon"],
                   drift=bool(fields["drift"]), hazard_radius=fields["hazard_radius"])


@dataclass(frozen=True)
class DatasetConfig:
    n_random: int
    n_replay: int
    pre_violation_keep: int = 100

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetConfig":
        fields = _take(raw, "dataset", {"n_random": _as_int, "n_replay": _as_int},
                       {"pre_violation_keep": _as_int})
        keep = fields["pre_violation_keep"] if fields["pre_violation_keep"] is not None else 100
        if fields["n_random"] < 0 or fields["n_replay"] < 0 or keep < 1:
            raise ConfigError("dataset sizes must be non-negative and pre_violation_keep >= 1")
        if fields["n_random"] + fields["n_replay"] == 0:
            raise ConfigError("dataset must request at least one transition")
        return cls(n_random=fields["n_random"], n_replay=fields["n_replay"],
                   pre_violation_keep=keep)


@dataclass(frozen=True)
class NetworkConfig:
    hidden: tuple = (64, 64)
    activation: str = "tanh"

    @classmethod
    def from_dict(cls, raw: dict) -> "NetworkConfig":
        fields = _take(raw, "network", {}, {"hidden": _as_hidden, "activation": _as_str})
        activation = fields["activation"] or "tanh"
        if activation not in ("tanh", "relu"):
            raise ConfigError(f"network.activation must be tanh or relu, got {activation!r}")
        return cls(hidden=fields["hidden"] or (64, 64), activation=activation)


@dataclass(frozen=True)
class ExperimentConfig:
    environment: EnvironmentConfig
    method: str
    seeds: tuple
    dataset: DatasetConfig
    n_pretrain: int
    n_online: int
    epsilon_safe: float | str
    gamma: float
    gamma_safe: float
    expectile_tau: float
    output_dir: str
    network: NetworkConfig = NetworkConfig()
    eval_episodes: int = 200
    pretrain_batch_size: int = 256
    pretrain_lr: float = 3e-4
    update_ratio: int = 1
    sac_start_steps: int = 1000
    qlearn_alpha: float = 0.2
    ablation_epsilons: tuple = (0.3, 0.5, 0.7)
    workers: int = 1

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        fields = _take(
            raw, "config",
            required={
                "environment": dict, "method": _as_str, "seeds": list, "dataset": dict,
                "n_pretrain": _as_int, "n_online": _as_int, "epsilon_safe": lambda x: x,
                "gamma": _as_float, "gamma_safe": _as_float, "expectile_tau": _as_float,
                "output_dir": _as_str,
            },
            optional={
                "network": dict, "eval_episodes": _as_int, "pretrain_batch_size": _as_int,
                "pretrain_lr": _as_float, "update_ratio": _as_int, "sac_start_steps": _as_int,
                "qlearn_alpha": _as_float, "ablation_epsilons": list, "workers": _as_int,
            },
        )
        method = fields["method"]
        if method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
        seeds = fields["seeds"]
        if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        eps = fields["epsilon_safe"]
        if isinstance(eps, str):
            if eps != "auto":
                raise ConfigError(f"epsilon_safe must be a positive number or 'auto', got {eps!r}")
        else:
            eps = float(eps)
            if eps <= 0:
                raise ConfigError("epsilon_safe must be positive")
        if not (0.0 <= fields["gamma"] < 1.0):
            raise ConfigError("gamma must be in [0, 1)")
        if not (0.0 <= fields["gamma_safe"] <= 1.0):
            raise ConfigError("gamma_safe must be in [0, 1]")
        if not (0.0 < fields["expectile_tau"] < 1.0):
            raise ConfigError("expectile_tau must be in (0, 1)")
        if fields["n_pretrain"] < 0 or fields["n_online"] < 0:
            raise ConfigError("step counts must be non-negative")
        ablation = fields["ablation_epsilons"]
        if ablation is not None:
            if len(ablation) < 2 or not all(isinstance(e, (int, float)) and e > 0 for e in ablation):
                raise ConfigError("ablation_epsilons needs >= 2 positive values")
            ablation = tuple(float(e) for e in ablation)
        return cls(
            environment=EnvironmentConfig.from_dict(fields["environment"]),
            method=method,
            seeds=tuple(seeds),
            dataset=DatasetConfig.from_dict(fields["dataset"]),
            n_pretrain=fields["n_pretrain"],
            n_online=fields["n_online"],
            epsilon_safe=eps,
            gamma=fields["gamma"],
            gamma_safe=fields["gamma_safe"],
            expectile_tau=fields["expectile_tau"],
            output_dir=fields["output_dir"],
            network=NetworkConfig.from_dict(fields["network"] or {}),
            eval_episodes=fields["eval_episodes"] or 200,
            pretrain_batch_size=fields["pretrain_batch_size"] or 256,
            pretrain_lr=fields["pretrain_lr"] or 3e-4,
            update_ratio=fields["update_ratio"] or 1,
            sac_start_steps=fields["sac_start_steps"] if fields["sac_start_steps"] is not None else 1000,
            qlearn_alpha=fields["qlearn_alpha"] or 0.2,
            ablation_epsilons=ablation or (0.3, 0.5, 0.7),
            workers=fields["workers"] or 1,
        )

    def resolve_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        from dataclasses import replace
        return replace(self, **kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)
