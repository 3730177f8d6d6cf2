"""Shared primitives for safety-terminated MDPs.

Conventions used throughout the package:

* a "violation" is a transition whose next state is a failure state; its
  cost is 1 and it always ends the episode,
* dead-end states are non-failure states from which every policy eventually
  fails,
* an action is admissible under a safety critic when its predicted
  discounted cost is strictly below the safety threshold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class StateLabel(Enum):
    SAFE = "safe"
    DEAD_END = "dead_end"
    FAIL = "fail"


class CriticDivergenceError(RuntimeError):
    """Raised when a critic produces non-finite values."""


class EpisodeOverError(RuntimeError):
    """Raised when an environment is stepped after the episode ended."""


def cost_indicator(next_state_label: StateLabel) -> int:
    """Binary cost of a transition, determined by the label of its landing state.

    Only failure states incur cost; dead-ends cost nothing until the failure
    actually happens.
    """
    if not isinstance(next_state_label, StateLabel):
        raise TypeError(f"expected StateLabel, got {type(next_state_label)!r}")
    return 1 if next_state_label is StateLabel.FAIL else 0


def is_action_admissible(q_value: float, epsilon_safe: float) -> bool:
    """Strict threshold rule: an action passes iff its cost value is < epsilon.

    Ties at exactly epsilon are treated as unsafe (conservative).
    """
    if not epsilon_safe > 0:
        raise ValueError(f"epsilon_safe must be positive, got {epsilon_safe}")
    if not np.isfinite(q_value):
        raise CriticDivergenceError(f"non-finite critic value: {q_value}")
    return bool(q_value < epsilon_safe)


@dataclass(frozen=True)
class SmdpSpec:
    """Static description of one environment: dimensions, bounds, discounts."""

    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    gamma: float
    gamma_safe: float
    horizon: int
    initial_distribution: str = "default"

    def __post_init__(self):
        object.__setattr__(self, "action_low", np.asarray(self.action_low, dtype=float))
        object.__setattr__(self, "action_high", np.asarray(self.action_high, dtype=float))
        if self.state_dim <= 0 or self.action_dim <= 0:
            raise ValueError("state_dim and action_dim must be positive")
        if self.action_low.shape != (self.action_dim,) or self.action_high.shape != (self.action_dim,):
            raise ValueError("action bounds must have shape (action_dim,)")
        if not np.all(self.action_low < self.action_high):
            raise ValueError("action_low must be strictly below action_high per dimension")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        # gamma_safe = 1 is the probability-of-eventual-failure reading.
        if not (0.0 <= self.gamma_safe <= 1.0):
            raise ValueError(f"gamma_safe must be in [0, 1], got {self.gamma_safe}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass(frozen=True)
class Transition:
    """One environment step, including the pre-correction action."""

    state: np.ndarray
    proposed_action: np.ndarray
    executed_action: np.ndarray
    next_state: np.ndarray
    reward: float
    cost: int
    done: bool
    corrected: bool = False

    def __post_init__(self):
        for name in ("state", "proposed_action", "executed_action", "next_state"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.cost not in (0, 1):
            raise ValueError(f"cost must be 0 or 1, got {self.cost}")
        if self.cost == 1 and not self.done:
            raise ValueError("a violation must terminate the episode (cost=1 requires done)")


CSV_SCALAR_COLUMNS = ("reward", "cost", "done", "corrected")


class TransitionBatch:
    """Columnar store for transitions.

    Serialized as a flat columnar binary file (``.npz``) plus a CSV mirror
    with one row per transition.  ``episode_ids`` ride along in the binary
    file only; the CSV carries exactly the per-transition columns.
    """

    def __init__(self, states, proposed_actions, executed_actions, next_states,
                 rewards, costs, dones, corrected, episode_ids=None):
        self.states = np.atleast_2d(np.asarray(states, dtype=float))
        self.proposed_actions = np.atleast_2d(np.asarray(proposed_actions, dtype=float))
        self.executed_actions = np.atleast_2d(np.asarray(executed_actions, dtype=float))
        self.next_states = np.atleast_2d(np.asarray(next_states, dtype=float))
        self.rewards = np.asarray(rewards, dtype=float).reshape(-1)
        self.costs = np.asarray(costs, dtype=np.int64).reshape(-1)
        self.dones = np.asarray(dones, dtype=bool).reshape(-1)
        self.corrected = np.asarray(corrected, dtype=bool).reshape(-1)
        n = len(self.rewards)
        if episode_ids is None:
            episode_ids = np.zeros(n, dtype=np.int64)
        self.episode_ids = np.asarray(episode_ids, dtype=np.int64).reshape(-1)
        self._validate()

    def _validate(self):
        n = len(self)
        for name in ("states", "proposed_actions", "executed_actions", "next_states"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} rows, expected {n}")
        for name in ("costs", "dones", "corrected", "episode_ids"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has wrong length")
        if not np.isin(self.costs, (0, 1)).all():
            raise ValueError("costs must be binary")
        if np.any((self.costs == 1) & ~self.dones):
            raise ValueError("cost=1 transitions must be terminal")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.proposed_actions.shape[1]

    @classmethod
    def from_transitions(cls, transitions, episode_ids=None) -> "TransitionBatch":
        if not transitions:
            raise ValueError("empty transition list")
        return cls(
            states=np.stack([t.state for t in transitions]),
            proposed_actions=np.stack([t.proposed_action for t in transitions]),
            executed_actions=np.stack([t.executed_action for t in transitions]),
            next_states=np.stack([t.next_state for t in transitions]),
            rewards=[t.reward for t in transitions],
            costs=[t.cost for t in transitions],
            dones=[t.done for t in transitions],
            corrected=[t.corrected for t in transitions],
            episode_ids=episode_ids,
        )

    def select(self, index) -> "TransitionBatch":
        return TransitionBatch(
            self.states[index], self.proposed_actions[index], self.executed_actions[index],
            self.next_states[index], self.rewards[index], self.costs[index],
            self.dones[index], self.corrected[index], self.episode_ids[index],
        )

    @staticmethod
    def concatenate(parts) -> "TransitionBatch":
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        return TransitionBatch(
            np.concatenate([p.states for p in parts]),
            np.concatenate([p.proposed_actions for p in parts]),
            np.concatenate([p.executed_actions for p in parts]),
            np.concatenate([p.next_states for p in parts]),
            np.concatenate([p.rewards for p in parts]),
            np.concatenate([p.costs for p in parts]),
            np.concatenate([p.dones for p in parts]),
            np.concatenate([p.corrected for p in parts]),
            np.concatenate([p.episode_ids for p in parts]),
        )

    # --- serialization ---

    def save_npz(self, path) -> None:
        np.savez(
            path,
            states=self.states,
            proposed_actions=self.proposed_actions,
            executed_actions=self.executed_actions,
            next_states=self.next_states,
            rewards=self.rewards,
            costs=self.costs,
            dones=self.dones,
            corrected=self.corrected,
            episode_ids=self.episode_ids,
        )

    @classmethod
    def load_npz(cls, path) -> "TransitionBatch":
        with np.load(path) as data:
            return cls(**{k: data[k] for k in data.files})

    def csv_header(self) -> list[str]:
        cols = []
        for prefix, arr in (("state", self.states), ("proposed_action", self.proposed_actions),
                            ("executed_action", self.executed_actions), ("next_state", self.next_states)):
            cols.extend(f"{prefix}{i}" for i in range(arr.shape[1]))
        cols.extend(CSV_SCALAR_COLUMNS)
        return cols

    def write_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.csv_header())
            for i in range(len(self)):
                row = (
                    [repr(float(x)) for x in self.states[i]]
                    + [repr(float(x)) for x in self.proposed_actions[i]]
                    + [repr(float(x)) for x in self.executed_actions[i]]
                    + [repr(float(x)) for x in self.next_states[i]]
                    + [repr(float(self.rewards[i])), int(self.costs[i]),
                       int(self.dones[i]), int(self.corrected[i])]
                )
                writer.writerow(row)

    @classmethod
    def read_csv(cls, path) -> "TransitionBatch":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [row for row in reader]
        dims = {}
        for prefix in ("state", "proposed_action", "executed_action", "next_state"):
            dims[prefix] = sum(1 for col in header if col.startswith(prefix) and col[len(prefix):].isdigit())
        if dims["state"] == 0:
            raise ValueError(f"not a transition CSV: {path}")
        values = np.asarray(rows, dtype=float)
        off = 0
        fields = []
        for prefix in ("state", "proposed_action", "executed_action", "next_state"):
            fields.append(values[:, off:off + dims[prefix]])
            off += dims[prefix]
        rewards = values[:, off]
        costs = values[:, off + 1]
        dones = values[:, off + 2] > 0.5
        corrected = values[:, off + 3] > 0.5
        return cls(fields[0], fields[1], fields[2], fields[3], rewards, costs, dones, corrected)

    def save(self, stem) -> tuple[Path, Path]:
        """Write both the binary file and the CSV mirror next to each other."""
        stem = Path(stem)
        npz_path = stem.with_suffix(".npz")
        csv_path = stem.with_suffix(".csv")
        self.save_npz(npz_path)
        self.write_csv(csv_path)
        return npz_path, csv_path
