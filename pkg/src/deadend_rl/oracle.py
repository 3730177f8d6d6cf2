"""Exact analysis on finite deterministic safety MDPs.

Everything here is brute force on explicit tables: dead-end enumeration by
backward fixpoint, optimal cost values by value iteration, policy cost
evaluation, escape-time computation, and an exhaustive one-step soundness
check of the behavior-correction rule.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import StateLabel

LABEL_SAFE = 0
LABEL_DEAD = 1
LABEL_FAIL = 2

_LABEL_TO_ENUM = {LABEL_SAFE: StateLabel.SAFE, LABEL_DEAD: StateLabel.DEAD_END, LABEL_FAIL: StateLabel.FAIL}


def to_state_label(code: int) -> StateLabel:
    return _LABEL_TO_ENUM[int(code)]


class EscapeCycleError(RuntimeError):
    """A cycle inside the dead-end region: failure is not guaranteed in finite
    time, so the bounded-escape assumption (and hence the model) is broken."""


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TabularSMDP:
    """Explicit deterministic finite MDP with binary failure labels.

    ``successor[s, a]`` is the unique landing state; failure states absorb.
    """

    successor: np.ndarray
    fail: np.ndarray
    initial_states: np.ndarray

    def __post_init__(self):
        succ = np.asarray(self.successor, dtype=np.int64)
        fail = np.asarray(self.fail, dtype=bool).reshape(-1)
        init = np.asarray(self.initial_states, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "successor", succ)
        object.__setattr__(self, "fail", fail)
        object.__setattr__(self, "initial_states", init)
        n = succ.shape[0]
        if fail.shape[0] != n:
            raise ValueError("fail mask length must match the state count")
        if succ.min() < 0 or succ.max() >= n:
            raise ValueError("successor indices out of range")
        if not np.all(succ[fail] == np.arange(n)[fail, None]):
            raise ValueError("failure states must be absorbing")
        if len(init) == 0 or fail[init].all():
            raise ValueError("need at least one non-failure initial state")

    @property
    def n_states(self) -> int:
        return self.successor.shape[0]

    @property
    def n_actions(self) -> int:
        return self.successor.shape[1]

    @property
    def step_cost(self) -> np.ndarray:
        """Per-(state, action) binary cost: 1 iff the landing state fails."""
        return self.fail[self.successor].astype(float)


def enumerate_dead_ends(smdp: TabularSMDP) -> np.ndarray:
    """Label every state SAFE / DEAD_END / FAIL by backward fixpoint.

    A non-failure state is a dead-end iff every action lands in a failure or
    dead-end state; what is left over keeps at least one way to stay out,
    which is exactly the safe-state condition.
    """
    doomed = smdp.fail.copy()
    while True:
        newly = ~doomed & doomed[smdp.successor].all(axis=1)
        if not newly.any():
            break
        doomed |= newly
    labels = np.full(smdp.n_states, LABEL_SAFE, dtype=np.int64)
    labels[doomed] = LABEL_DEAD
    labels[smdp.fail] = LABEL_FAIL
    return labels


def escape_times(smdp: TabularSMDP, labels: np.ndarray) -> np.ndarray:
    """Longest survivable step count from each dead-end state (0 elsewhere).

    Counting includes the final transition into the failure state, so a
    dead-end adjacent to failure has escape time 1.  Raises
    :class:`EscapeCycleError` if the values fail to settle, which can only
    happen when the dead-end region contains a failure-free cycle.
    """
    dead = labels == LABEL_DEAD
    if not dead.any():
        return np.zeros(smdp.n_states, dtype=np.int64)
    succ_dead_or_fail = dead[smdp.successor] | smdp.fail[smdp.successor]
    if not succ_dead_or_fail[dead].all():
        raise ValueError("dead-end state with a safe successor: labels are inconsistent")
    esc = np.zeros(smdp.n_states, dtype=np.int64)
    for _ in range(smdp.n_states + 1):
        succ_esc = np.where(smdp.fail[smdp.successor], 0, esc[smdp.successor])
        new_esc = np.where(dead, 1 + succ_esc.max(axis=1), 0)
        if np.array_equal(new_esc, esc):
            return esc
        esc = new_esc
    raise EscapeCycleError("dead-end region contains a cycle that never fails")


def compute_assumption_horizon(smdp: TabularSMDP, labels: np.ndarray) -> int:
    """Maximum steps any trajectory can survive after entering a dead-end."""
    return int(escape_times(smdp, labels).max())


@dataclass
class ExactValues:
    """Optimal cost values plus the state partition for one table."""

    v_star: np.ndarray
    q_star: np.ndarray
    labels: np.ndarray
    escape: np.ndarray
    h_dead: int
    residuals: list[float] = field(repr=False, default_factory=list)

    def recovery_actions(self) -> np.ndarray:
        """Deterministic cost-greedy action per state (lowest index on ties)."""
        return self.q_star.argmin(axis=1)


def value_iteration_optimal(smdp: TabularSMDP, gamma_safe: float, tol: float = 1e-10,
                            max_iter: int = 200_000) -> ExactValues:
    """Solve the optimal cost Bellman equation on the table.

    Backup: Q(s, a) = c + (1 - c) * gamma_safe * V(s'), V = min over actions.
    The binary cost masks the bootstrap on failing transitions, which pins
    failure states at value 1 without special-casing.
    """
    if not (0.0 <= gamma_safe < 1.0):
        raise ValueError(f"gamma_safe must be in [0, 1) for value iteration, got {gamma_safe}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    cost = smdp.step_cost
    keep = 1.0 - cost
    v = smdp.fail.astype(float)
    residuals: list[float] = []
    for _ in range(max_iter):
        q = cost + keep * gamma_safe * v[smdp.successor]
        v_new = q.min(axis=1)
        residual = float(np.max(np.abs(v_new - v)))
        residuals.append(residual)
        v = v_new
        if residual < tol:
            break
    else:
        raise ConvergenceError(f"value iteration did not reach tol={tol} in {max_iter} sweeps")
    q = cost + keep * gamma_safe * v[smdp.successor]
    labels = enumerate_dead_ends(smdp)
    esc = escape_times(smdp, labels)
    return ExactValues(v_star=v, q_star=q, labels=labels, escape=esc,
                       h_dead=int(esc.max()), residuals=residuals)


def policy_cost_evaluation(smdp: TabularSMDP, policy: np.ndarray, gamma_safe: float,
                           tol: float = 1e-10, max_iter: int = 200_000) -> np.ndarray:
    """Expected discounted cost of a fixed stochastic policy, per state."""
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (smdp.n_states, smdp.n_actions):
        raise ValueError("policy must be (n_states, n_actions)")
    if not np.allclose(policy.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("policy rows must sum to 1")
    if not (0.0 <= gamma_safe < 1.0):
        raise ValueError(f"gamma_safe must be in [0, 1), got {gamma_safe}")
    cost = smdp.step_cost
    keep = 1.0 - cost
    v = smdp.fail.astype(float)
    for _ in range(max_iter):
        q = cost + keep * gamma_safe * v[smdp.successor]
        v_new = (policy * q).sum(axis=1)
        residual = float(np.max(np.abs(v_new - v)))
        v = v_new
        if residual < tol:
            return v
    raise ConvergenceError(f"policy evaluation did not reach tol={tol} in {max_iter} sweeps")


def policy_q_values(smdp: TabularSMDP, v: np.ndarray, gamma_safe: float) -> np.ndarray:
    """One-step cost backup of a given state-value vector."""
    cost = smdp.step_cost
    return cost + (1.0 - cost) * gamma_safe * v[smdp.successor]


def greedy_policy_matrix(q: np.ndarray) -> np.ndarray:
    """One-hot policy that picks the argmin-cost action per state."""
    policy = np.zeros_like(q)
    policy[np.arange(q.shape[0]), q.argmin(axis=1)] = 1.0
    return policy


@dataclass
class CertificationReport:
    """Outcome of the exhaustive one-step shield soundness check."""

    epsilon_safe: float
    h_dead: int
    n_safe_states: int
    n_pairs_checked: int
    n_corrected: int
    n_unsafe_entries: int
    initial_states_safe: bool
    violating_pairs: list[tuple[int, int]]

    @property
    def passed(self) -> bool:
        return self.n_unsafe_entries == 0 and self.initial_states_safe

    def summary(self) -> str:
        lines = [
            "shield soundness certification",
            f"  epsilon_safe         : {self.epsilon_safe!r}",
            f"  dead-end horizon     : {self.h_dead}",
            f"  safe states          : {self.n_safe_states}",
            f"  (state, action) pairs: {self.n_pairs_checked}",
            f"  corrected pairs      : {self.n_corrected}",
            f"  unsafe entries       : {self.n_unsafe_entries}",
            f"  initial states safe  : {self.initial_states_safe}",
            f"  verdict              : {'PASS' if self.passed else 'FAIL'}",
        ]
        if self.violating_pairs:
            shown = ", ".join(f"(s={s}, a={a})" for s, a in self.violating_pairs[:10])
            lines.append(f"  first violations     : {shown}")
        return "\n".join(lines)


def certify_theorem2(smdp: TabularSMDP, values: ExactValues, epsilon_safe: float) -> CertificationReport:
    """Exhaustively check the corrected system from every safe state.

    For each safe state and each possible task action, apply the threshold
    rule with the optimal critic (correct to the cost-greedy action when the
    task action's Q is not strictly below epsilon) and verify the landing
    state is safe.  Since the check covers every reachable one-step frontier,
    a clean report extends to entire trajectories by induction.
    """
    safe = values.labels == LABEL_SAFE
    safe_idx = np.flatnonzero(safe)
    rec = values.recovery_actions()
    q = values.q_star
    admissible = q[safe_idx] < epsilon_safe
    executed = np.where(admissible, np.arange(smdp.n_actions)[None, :], rec[safe_idx][:, None])
    landing = smdp.successor[safe_idx[:, None], executed]
    unsafe = values.labels[landing] != LABEL_SAFE
    bad = np.argwhere(unsafe)
    violating = [(int(safe_idx[i]), int(a)) for i, a in bad[:100]]
    return CertificationReport(
        epsilon_safe=float(epsilon_safe),
        h_dead=values.h_dead,
        n_safe_states=int(safe.sum()),
        n_pairs_checked=int(safe_idx.size * smdp.n_actions),
        n_corrected=int((~admissible).sum()),
        n_unsafe_entries=int(unsafe.sum()),
        initial_states_safe=bool(safe[smdp.initial_states].all()),
        violating_pairs=violating,
    )


def write_oracle_report(smdp: TabularSMDP, values: ExactValues, path) -> Path:
    """Per-state CSV: label, optimal value, per-action Q values."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["state", "label", "escape", "v_star"]
                        + [f"q_star_a{a}" for a in range(smdp.n_actions)])
        for s in range(smdp.n_states):
            writer.writerow([s, to_state_label(values.labels[s]).value, int(values.escape[s]),
                             repr(float(values.v_star[s]))]
                            + [repr(float(values.q_star[s, a])) for a in range(smdp.n_actions)])
    return path
