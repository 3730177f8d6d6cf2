"""Desk-scale environments with safety-terminated episodes.

Three worlds, all cheap enough for exact analysis or long training runs:

* :class:`CarBrakeEnv`: 1-D braking in front of an obstacle; its dead-end
  set has the closed form "stopping distance exceeds remaining distance",
* :class:`GridHazardEnv`: a 12x12 gridworld with a hazard wall and a chute
  corridor that drags the agent into a hazard over several steps,
* :class:`PointMomentumEnv`: 2-D point mass with inertia, circular hazards
  and a circular goal.

CarBrake and the grid support exact discretization via :func:`tabularize`.
"""

from __future__ import annotations

import numpy as np

from .core import EpisodeOverError, SmdpSpec
from .oracle import TabularSMDP


class CarBrakeEnv:
    """Drive toward an obstacle; colliding with residual speed is a violation.

    State is (distance, velocity).  The action is the acceleration fraction
    in [-1, 1].  Reward is the distance covered per step, so driving fast is
    attractive and braking late is how episodes fail.
    """

    D_MAX = 10.0
    V_MAX = 5.0
    A_MAX = 1.0
    DT = 0.2

    # Discrete action set used for tabular analysis.
    TABULAR_ACTIONS = np.array([[-1.0], [-0.5], [0.0], [0.5], [1.0]])

    def __init__(self, horizon: int = 200, gamma: float = 0.99, gamma_safe: float = 0.9):
        self.spec = SmdpSpec(
            state_dim=2, action_dim=1,
            action_low=[-1.0], action_high=[1.0],
            gamma=gamma, gamma_safe=gamma_safe, horizon=horizon,
            initial_distribution="fixed-start",
        )
        self.state_scale = np.array([self.D_MAX, self.V_MAX])
        self.discrete_actions = None
        self.stochastic = False
        self._state = None
        self._done = True

    def reset(self, seed: int | None = None) -> np.ndarray:
        del seed  # fixed start; argument kept for interface parity
        self._state = np.array([self.D_MAX, 0.0])
        self._done = False
        return self._state.copy()

    def dynamics(self, state: np.ndarray, action: float) -> tuple[np.ndarray, bool]:
        """One step of the deterministic transition map; returns (next, failed)."""
        d, v = float(state[0]), float(state[1])
        a = float(np.clip(action, -1.0, 1.0))
        v_next = float(np.clip(v + a * self.A_MAX * self.DT, 0.0, self.V_MAX))
        d_next = d - v_next * self.DT
        failed = d_next <= 0.0 and v_next > 0.0
        return np.array([d_next, v_next]), failed

    def step(self, action) -> tuple[np.ndarray, float, int, bool]:
        if self._done:
            raise EpisodeOverError("reset() the environment before stepping again")
        action = float(np.asarray(action).reshape(-1)[0])
        next_state, failed = self.dynamics(self._state, action)
        if failed:
            reward, cost, done = 0.0, 1, True
        else:
            reward, cost, done = float(next_state[1] * self.DT), 0, False
        self._state = next_state
        self._done = done
        return next_state.copy(), reward, cost, done

    @staticmethod
    def dead_end_closed_form(d: np.ndarray, v: np.ndarray, a_max: float = 1.0) -> np.ndarray:
        """Analytic dead-end law: stopping distance v^2/(2 a_max) exceeds d."""
        return np.asarray(v) ** 2 / (2.0 * a_max) > np.asarray(d)


GRID_ACTIONS = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]])  # up, down, left, right
GRID_ACTION_NAMES = ("up", "down", "left", "right")


class GridHazardEnv:
    """12x12 gridworld with a hazard wall and a four-cell chute.

    Chute cells drift one cell per step toward a hazard no matter what action
    is taken, so every chute cell is a dead-end with escape time equal to its
    distance from the hazard.  Reaching the goal pays +1 and ends the
    episode; every other step costs -0.01.
    """

    SIZE = 12
    STEP_REWARD = -0.01
    GOAL_REWARD = 1.0

    def __init__(self, horizon: int = 100, gamma: float = 0.99, gamma_safe: float = 0.9):
        self.spec = SmdpSpec(
            state_dim=2, action_dim=2,
            action_low=[-1.0, -1.0], action_high=[1.0, 1.0],
            gamma=gamma, gamma_safe=gamma_safe, horizon=horizon,
            initial_distribution="fixed-start",
        )
        self.start = (10, 1)
        self.goal = (1, 10)
        hazards = {(r, 6) for r in range(3, 9)}
        hazards.add((6, 2))
        self.hazards = hazards
        # chute: entering any of these cells forces a drift down column 2
        # into the hazard at (6, 2)
        self.chute = {(r, 2): (r + 1, 2) for r in range(2, 6)}
        self.state_scale = np.array([self.SIZE - 1.0, self.SIZE - 1.0])
        self.discrete_actions = GRID_ACTIONS.astype(float)
        self.n_actions = 4
        self.stochastic = False
        self._cell = None
        self._done = True

    # --- indexing helpers shared with the tabular oracle ---

    def cell_index(self, cell) -> int:
        return int(cell[0]) * self.SIZE + int(cell[1])

    def state_index(self, state) -> int:
        return self.cell_index((round(float(state[0])), round(float(state[1]))))

    def index_cell(self, idx: int) -> tuple[int, int]:
        return divmod(int(idx), self.SIZE)

    def _move(self, cell, action: int) -> tuple[int, int]:
        if cell in self.chute:
            return self.chute[cell]
        dr, dc = GRID_ACTIONS[action]
        r, c = cell[0] + dr, cell[1] + dc
        if not (0 <= r < self.SIZE and 0 <= c < self.SIZE):
            return cell  # bump into the wall, stay in place
        return (int(r), int(c))

    def reset(self, seed: int | None = None) -> np.ndarray:
        del seed
        self._cell = self.start
        self._done = False
        return np.array(self._cell, dtype=float)

    def step(self, action) -> tuple[np.ndarray, float, int, bool]:
        if self._done:
            raise EpisodeOverError("reset() the environment before stepping again")
        action = int(action)
        if not 0 <= action < 4:
            raise ValueError(f"grid action must be in 0..3, got {action}")
        nxt = self._move(self._cell, action)
        if nxt in self.hazards:
            reward, cost, done = 0.0, 1, True
        elif nxt == self.goal:
            reward, cost, done = self.GOAL_REWARD, 0, True
        else:
            reward, cost, done = self.STEP_REWARD, 0, False
        self._cell = nxt
        self._done = done
        return np.array(nxt, dtype=float), reward, cost, done


class PointMomentumEnv:
    """2-D point mass with inertia navigating around circular hazards.

    Velocity changes by at most 0.1 per step, so the stopping envelope of a
    fast approach overlaps a hazard before contact does: genuine multi-step
    dead-ends.  Reward is shaped progress toward the goal plus a bonus on
    arrival, which makes cutting close to hazards attractive.

    ``drift=True`` turns on a deterministic side-to-side oscillation of the
    hazard centers; the current offset is appended to the observation.  That
    mode is excluded from all exact-analysis paths.
    """

    U_MAX = 0.3
    ACCEL = 0.1
    P_STEP = 0.5
    PROGRESS_SCALE = 3.0
    STEP_COST = 0.01
    GOAL_REWARD = 10.0

    def __init__(self, horizon: int = 120, gamma: float = 0.99, gamma_safe: float = 0.9,
                 drift: bool = False, hazard_radius: float = 0.3):
        self.drift = bool(drift)
        state_dim = 5 if self.drift else 4
        self.spec = SmdpSpec(
            state_dim=state_dim, action_dim=2,
            action_low=[-1.0, -1.0], action_high=[1.0, 1.0],
            gamma=gamma, gamma_safe=gamma_safe, horizon=horizon,
            initial_distribution="uniform-start-region",
        )
        self.hazards = [(0.0, 0.0, float(hazard_radius))]
        self.goal = (0.8, 0.0, 0.15)
        self.start_center = np.array([-0.8, 0.0])
        self.start_halfwidth = np.array([0.08, 0.2])
        self.start_clearance = 0.2
        self.drift_amp = 0.25
        self.drift_period = 80
        scale = [1.0, 1.0, self.U_MAX, self.U_MAX]
        if self.drift:
            scale.append(max(self.drift_amp, 1e-6))
        self.state_scale = np.array(scale)
        self.discrete_actions = None
        self.stochastic = self.drift
        self._p = None
        self._u = None
        self._t = 0
        self._done = True

    def _hazard_offset(self) -> float:
        if not self.drift:
            return 0.0
        return self.drift_amp * float(np.sin(2.0 * np.pi * self._t / self.drift_period))

    def _hazard_centers(self) -> list[tuple[float, float, float]]:
        off = self._hazard_offset()
        return [(cx + off, cy, r) for cx, cy, r in self.hazards]

    def _observe(self) -> np.ndarray:
        obs = np.concatenate([self._p, self._u])
        if self.drift:
            obs = np.append(obs, self._hazard_offset())
        return obs

    def _in_hazard(self, p: np.ndarray) -> bool:
        return any(np.hypot(p[0] - cx, p[1] - cy) <= r for cx, cy, r in self._hazard_centers())

    def _goal_dist(self, p: np.ndarray) -> float:
        return float(np.hypot(p[0] - self.goal[0], p[1] - self.goal[1]))

    def reset(self, seed: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        for _ in range(1000):
            p = self.start_center + rng.uniform(-1.0, 1.0, 2) * self.start_halfwidth
            clear = all(np.hypot(p[0] - cx, p[1] - cy) > r + self.start_clearance
                        for cx, cy, r in self.hazards)
            if clear:
                break
        else:  # pragma: no cover - start region never overlaps the hazards
            raise RuntimeError("could not sample a clear start position")
        self._p = np.clip(p, -1.0, 1.0)
        self._u = np.zeros(2)
        self._t = 0
        self._done = False
        return self._observe()

    def step(self, action) -> tuple[np.ndarray, float, int, bool]:
        if self._done:
            raise EpisodeOverError("reset() the environment before stepping again")
        a = np.clip(np.asarray(action, dtype=float).reshape(2), -1.0, 1.0)
        prev_dist = self._goal_dist(self._p)
        u = np.clip(self._u + self.ACCEL * a, -self.U_MAX, self.U_MAX)
        p = self._p + self.P_STEP * u
        for axis in range(2):
            if p[axis] < -1.0 or p[axis] > 1.0:
                p[axis] = np.clip(p[axis], -1.0, 1.0)
                u[axis] = 0.0  # wall contact kills that velocity component
        self._t += 1
        self._p, self._u = p, u
        if self._in_hazard(p):
            reward, cost, done = 0.0, 1, True
        elif self._goal_dist(p) <= self.goal[2]:
            reward, cost, done = self.GOAL_REWARD, 0, True
        else:
            reward = self.PROGRESS_SCALE * (prev_dist - self._goal_dist(p)) - self.STEP_COST
            cost, done = 0, False
        self._done = done
        return self._observe(), reward, cost, done


def encode_action(env, native_action) -> np.ndarray:
    """Native action -> real vector (identity for continuous environments)."""
    if env.discrete_actions is not None:
        return env.discrete_actions[int(native_action)].copy()
    return np.asarray(native_action, dtype=float).reshape(env.spec.action_dim)


def decode_action(env, action_vector):
    """Real vector -> native action (nearest encoding for discrete spaces)."""
    if env.discrete_actions is not None:
        dist = np.linalg.norm(env.discrete_actions - np.asarray(action_vector), axis=1)
        return int(np.argmin(dist))
    return np.asarray(action_vector, dtype=float).reshape(env.spec.action_dim)


def _nearest(grid: np.ndarray, value: float) -> int:
    return int(np.argmin(np.abs(grid - value)))


def tabularize(env, bins: tuple[int, int] | None = None) -> TabularSMDP:
    """Exact finite model of an environment on a state grid.

    The grid uses nearest-bin successors: apply the continuous dynamics from
    the grid point, then snap to the closest grid point.  The resulting table
    is an exact deterministic MDP in its own right; closeness to the
    continuous model is a separate, bounded approximation.
    """
    if isinstance(env, GridHazardEnv):
        size = env.SIZE
        n_states = size * size
        successor = np.zeros((n_states, 4), dtype=np.int64)
        fail = np.zeros(n_states, dtype=bool)
        for idx in range(n_states):
            cell = env.index_cell(idx)
            if cell in env.hazards:
                fail[idx] = True
                successor[idx, :] = idx
                continue
            if cell == env.goal:
                successor[idx, :] = idx  # absorbing terminal
                continue
            for a in range(4):
                successor[idx, a] = env.cell_index(env._move(cell, a))
        return TabularSMDP(successor=successor, fail=fail,
                           initial_states=np.array([env.cell_index(env.start)]))

    if isinstance(env, CarBrakeEnv):
        if bins is None:
            bins = (50, 25)
        n_d, n_v = bins
        if n_d < 2 or n_v < 2:
            raise ValueError("need at least 2 bins per axis")
        d_grid = np.linspace(0.0, env.D_MAX, n_d)
        v_grid = np.linspace(0.0, env.V_MAX, n_v)
        actions = env.TABULAR_ACTIONS.reshape(-1)
        n_states = n_d * n_v
        successor = np.zeros((n_states, len(actions)), dtype=np.int64)
        fail = np.zeros(n_states, dtype=bool)
        for i, d in enumerate(d_grid):
            for j, v in enumerate(v_grid):
                idx = i * n_v + j
                if d <= 0.0 and v > 0.0:
                    fail[idx] = True
                    successor[idx, :] = idx
                    continue
                for k, a in enumerate(actions):
                    nxt, _ = env.dynamics(np.array([d, v]), a)
                    ni = _nearest(d_grid, np.clip(nxt[0], 0.0, env.D_MAX))
                    nj = _nearest(v_grid, nxt[1])
                    successor[idx, k] = ni * n_v + nj
        start = _nearest(d_grid, env.D_MAX) * n_v + _nearest(v_grid, 0.0)
        return TabularSMDP(successor=successor, fail=fail,
                           initial_states=np.array([start]))

    raise TypeError(f"no tabularization for {type(env).__name__}")


def carbrake_grid(bins: tuple[int, int] = (50, 25)) -> tuple[np.ndarray, np.ndarray]:
    """The (distance, velocity) grid values matching ``tabularize`` order."""
    d_grid = np.linspace(0.0, CarBrakeEnv.D_MAX, bins[0])
    v_grid = np.linspace(0.0, CarBrakeEnv.V_MAX, bins[1])
    return d_grid, v_grid


def carbrake_state_of_index(idx: int, bins: tuple[int, int] = (50, 25)) -> np.ndarray:
    d_grid, v_grid = carbrake_grid(bins)
    i, j = divmod(int(idx), bins[1])
    return np.array([d_grid[i], v_grid[j]])


def carbrake_index_of_state(state, bins: tuple[int, int] = (50, 25)) -> int:
    d_grid, v_grid = carbrake_grid(bins)
    return _nearest(d_grid, float(state[0])) * bins[1] + _nearest(v_grid, float(state[1]))


def carbrake_conservative_index(state, bins: tuple[int, int] = (50, 25)) -> int:
    """Pessimistic projection onto the grid: round distance down, speed up.

    Used when a certified table drives decisions for the continuous system;
    the projected state is never less dangerous than the true one.
    """
    d_grid, v_grid = carbrake_grid(bins)
    i = int(np.searchsorted(d_grid, float(state[0]) + 1e-12, side="right") - 1)
    j = int(np.searchsorted(v_grid, float(state[1]) - 1e-12, side="left"))
    i = max(0, min(i, bins[0] - 1))
    j = max(0, min(j, bins[1] - 1))
    return i * bins[1] + j


def make_chain(n_dead: int = 1) -> TabularSMDP:
    """Small chain fixture: one safe state, ``n_dead`` drift states, one failure.

    From the safe state action 0 stays put and action 1 enters the drift
    corridor; inside the corridor every action moves one step closer to the
    failure state.
    """
    if n_dead < 1:
        raise ValueError("need at least one dead state")
    n_states = n_dead + 2
    successor = np.zeros((n_states, 2), dtype=np.int64)
    fail = np.zeros(n_states, dtype=bool)
    successor[0] = [0, 1]
    for s in range(1, n_dead + 1):
        successor[s] = [s + 1, s + 1]
    successor[n_states - 1] = [n_states - 1, n_states - 1]
    fail[n_states - 1] = True
    return TabularSMDP(successor=successor, fail=fail, initial_states=np.array([0]))


def chain_encode_state(idx: int, n_states: int) -> np.ndarray:
    return np.array([idx / (n_states - 1.0)])


CHAIN_ACTION_ENCODINGS = np.array([[-1.0], [1.0]])
