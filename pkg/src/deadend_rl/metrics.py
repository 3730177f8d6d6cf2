"""Evaluation rollouts and the metric suite.

Four headline numbers per arm:

* ACR: mean undiscounted return over test episodes,
* AVR: fraction of test episodes that end in a violation,
* TV : cumulative violations during training (from the trace),
* ARR: fraction of steps on which the shield replaced the action.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .online import behavior_correct


@dataclass
class MetricsReport:
    acr: float
    avr: float
    tv: int
    arr: float
    episode_len_mean: float
    n_episodes: int
    per_seed: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.avr <= 1.0):
            raise ValueError(f"AVR out of range: {self.avr}")
        if not (0.0 <= self.arr <= 1.0):
            raise ValueError(f"ARR out of range: {self.arr}")
        if self.tv < 0:
            raise ValueError("TV must be >= 0")

    SCALAR_FIELDS = ("acr", "avr", "tv", "arr", "episode_len_mean", "n_episodes")

    def to_csv(self, path) -> Path:
        """Aggregate row first, then one row per seed (when present)."""
        path = Path(path)
        def fmt(value):
            return repr(int(value)) if isinstance(value, (int, np.integer)) else repr(float(value))

        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("scope",) + self.SCALAR_FIELDS)
            writer.writerow(["aggregate"] + [fmt(getattr(self, f)) for f in self.SCALAR_FIELDS])
            for row in self.per_seed:
                writer.writerow([f"seed={row['seed']}"]
                                + [fmt(row[f]) for f in self.SCALAR_FIELDS])
        return path

    @classmethod
    def from_seed_rows(cls, rows: list[dict]) -> "MetricsReport":
        if not rows:
            raise ValueError("no per-seed results to aggregate")
        return cls(
            acr=float(np.mean([r["acr"] for r in rows])),
            avr=float(np.mean([r["avr"] for r in rows])),
            tv=int(np.sum([r["tv"] for r in rows])),
            arr=float(np.mean([r["arr"] for r in rows])),
            episode_len_mean=float(np.mean([r["episode_len_mean"] for r in rows])),
            n_episodes=int(np.sum([r["n_episodes"] for r in rows])),
            per_seed=rows,
        )


class ScriptedPolicy:
    """Wrap a plain function ``state -> native action`` for evaluation."""

    def __init__(self, fn):
        self._fn = fn

    def act(self, state):
        return self._fn(state)


def evaluate(policy, shield, env, n_episodes: int, seed: int = 0) -> MetricsReport:
    """Deterministic-policy evaluation: mean action / greedy action per step.

    TV is reported as 0 here; it belongs to training traces and gets filled
    in by the experiment runner.
    """
    if n_episodes < 1:
        raise ValueError("need at least one evaluation episode")
    rng = np.random.default_rng(seed)
    horizon = env.spec.horizon
    returns, violations, lengths = [], [], []
    corrected_steps = 0
    total_steps = 0
    for _ in range(n_episodes):
        state = env.reset(seed=int(rng.integers(2 ** 31)))
        ep_return = 0.0
        violated = 0
        for t in range(horizon):
            action = policy.act(state)
            executed, corrected = behavior_correct(shield, state, action)
            state, reward, cost, done = env.step(executed)
            ep_return += reward
            corrected_steps += int(corrected)
            total_steps += 1
            if cost == 1:
                violated = 1
            if done:
                break
        returns.append(ep_return)
        violations.append(violated)
        lengths.append(t + 1)
    return MetricsReport(
        acr=float(np.mean(returns)),
        avr=float(np.mean(violations)),
        tv=0,
        arr=corrected_steps / total_steps if total_steps else 0.0,
        episode_len_mean=float(np.mean(lengths)),
        n_episodes=n_episodes,
    )


def recompute_metrics_from_trace(path) -> dict:
    """Independent re-derivation of trace-level metrics straight from the CSV.

    Reads the raw file with the csv module only, so it shares no code with
    the writers it cross-checks.
    """
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    tv = sum(int(r["cost"]) for r in rows)
    n = len(rows)
    arr = sum(int(r["corrected"]) for r in rows) / n if n else 0.0
    by_episode: dict[int, float] = {}
    for r in rows:
        eid = int(r["episode"])
        by_episode[eid] = by_episode.get(eid, 0.0) + float(r["reward"])
    acr = float(np.mean(list(by_episode.values()))) if by_episode else 0.0
    return {"tv": tv, "arr": arr, "acr_training_episodes": acr, "n_steps": n}


def windowed_curves(trace, n_windows: int = 40) -> dict:
    """Per-window series for the learning-curve figure: mean reward per step,
    violation rate, correction ratio."""
    n = len(trace)
    if n == 0:
        raise ValueError("empty trace")
    edges = np.linspace(0, n, n_windows + 1, dtype=int)
    centers, reward, violation, correction = [], [], [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi <= lo:
            continue
        centers.append(float(trace.steps[lo:hi].mean()))
        reward.append(float(trace.rewards[lo:hi].mean()))
        violation.append(float(trace.costs[lo:hi].mean()))
        correction.append(float(trace.corrected[lo:hi].mean()))
    return {"step": np.array(centers), "reward": np.array(reward),
            "violation_rate": np.array(violation), "correction_ratio": np.array(correction)}
