"""Online phase: task-policy training inside a frozen behavior-correction shield.

The shield owns a safety critic and a recovery policy whose parameters never
change once the shield exists.  Every proposed task action is priced by the
critic; anything at or above the threshold is replaced by the recovery
action (the policy mean for continuous actions, the critic argmin for
discrete ones).  The learner's replay always stores the *proposed* action,
so from the learner's point of view the correction is part of the
environment dynamics.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import TransitionBatch, is_action_admissible
from .envs import decode_action, encode_action
from .nets import Adam, Mlp, SquashedGaussianPolicy, make_policy_net
from .oracle import ExactValues, TabularSMDP
from .pretrain import RecoveryPolicy, SafetyCritic


class ShieldMutationError(RuntimeError):
    pass


def _hash_arrays(*arrays) -> str:
    digest = hashlib.sha256()
    for arr in arrays:
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


class Shield:
    """Threshold rule around a frozen critic and a frozen recovery policy."""

    def __init__(self, critic: SafetyCritic, recovery: RecoveryPolicy,
                 epsilon_safe: float, discrete_actions: np.ndarray | None = None):
        if epsilon_safe <= 0:
            raise ValueError("epsilon_safe must be positive")
        recovery.freeze()
        self.critic = critic
        self.recovery = recovery
        self.epsilon_safe = float(epsilon_safe)
        self.discrete_actions = (None if discrete_actions is None
                                 else np.atleast_2d(np.asarray(discrete_actions, dtype=float)))

    def _encode(self, native_action) -> np.ndarray:
        if self.discrete_actions is not None:
            return self.discrete_actions[int(native_action)]
        return np.asarray(native_action, dtype=float).reshape(-1)

    def q_value(self, state, native_action) -> float:
        enc = self._encode(native_action)
        return float(self.critic.q_value(np.atleast_2d(state), enc[None, :])[0])

    def recovery_action(self, state):
        if self.discrete_actions is not None:
            states = np.repeat(np.atleast_2d(state), len(self.discrete_actions), axis=0)
            q = self.critic.q_value(states, self.discrete_actions)
            return int(np.argmin(q))
        return self.recovery.act(state)

    def correct(self, state, native_action):
        """Returns (executed action, corrected flag)."""
        q = self.q_value(state, native_action)
        if is_action_admissible(q, self.epsilon_safe):
            return native_action, False
        return self.recovery_action(state), True

    def params_hash(self) -> str:
        return _hash_arrays(self.critic.q_net.params, self.critic.v_net.params,
                            self.critic.target_q.params, self.recovery.policy.net.params,
                            np.array([self.epsilon_safe]))


class OracleShield:
    """Same correction rule, backed by exact tabular values.

    ``state_index_fn`` maps a raw environment state to a table row;
    ``native_of_action``/``index_of_action`` translate between table action
    indices and the environment's native actions (identity for discrete
    environments).
    """

    def __init__(self, smdp: TabularSMDP, values: ExactValues, epsilon_safe: float,
                 state_index_fn, native_of_action=None, index_of_action=None):
        if epsilon_safe <= 0:
            raise ValueError("epsilon_safe must be positive")
        self.smdp = smdp
        self.values = values
        self.epsilon_safe = float(epsilon_safe)
        self.state_index_fn = state_index_fn
        self.native_of_action = native_of_action or (lambda a: a)
        self.index_of_action = index_of_action or (lambda a: int(a))
        self._recovery = values.recovery_actions()

    def q_value(self, state, native_action) -> float:
        s = self.state_index_fn(state)
        a = self.index_of_action(native_action)
        return float(self.values.q_star[s, a])

    def recovery_action(self, state):
        return self.native_of_action(int(self._recovery[self.state_index_fn(state)]))

    def correct(self, state, native_action):
        q = self.q_value(state, native_action)
        if is_action_admissible(q, self.epsilon_safe):
            return native_action, False
        return self.recovery_action(state), True

    def params_hash(self) -> str:
        return _hash_arrays(self.values.q_star, np.array([self.epsilon_safe]))


def behavior_correct(shield, state, task_action):
    """Apply the threshold rule; ``shield=None`` passes the action through."""
    if shield is None:
        return task_action, False
    return shield.correct(state, task_action)


# ---------------------------------------------------------------------------
# task learners
# ---------------------------------------------------------------------------

class ReplayBuffer:
    """Ring buffer over proposed-action transitions."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.dones = np.zeros(capacity)
        self._pos = 0
        self._size = 0

    def store(self, state, action, reward, next_state, done) -> None:
        i = self._pos
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.dones[i] = float(done)
        self._pos = (self._pos + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def __len__(self) -> int:
        return self._size

    def sample(self, rng: np.random.Generator, batch_size: int) -> dict:
        idx = rng.integers(self._size, size=batch_size)
        return {"states": self.states[idx], "actions": self.actions[idx],
                "rewards": self.rewards[idx], "next_states": self.next_states[idx],
                "dones": self.dones[idx]}


@dataclass
class SacSettings:
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    lr: float = 3e-4
    gamma: float = 0.99
    target_rate: float = 0.005
    batch_size: int = 256
    buffer_size: int = 200_000
    start_steps: int = 1000
    alpha: float | str = "auto"
    target_entropy: float | None = None


class SacLearner:
    """Compact soft actor-critic: twin Q critics, squashed Gaussian actor,
    optional automatic entropy temperature."""

    def __init__(self, state_dim: int, action_dim: int, action_low, action_high,
                 state_scale, settings: SacSettings, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.settings = settings
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.state_scale = np.asarray(state_scale, dtype=float)
        hidden = tuple(settings.hidden)
        self.actor = SquashedGaussianPolicy(
            make_policy_net(state_dim, action_dim, hidden, settings.activation, rng),
            action_low, action_high)
        self.q1 = Mlp([state_dim + action_dim, *hidden, 1], settings.activation, "identity", rng)
        self.q2 = Mlp([state_dim + action_dim, *hidden, 1], settings.activation, "identity", rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.actor_opt = Adam(self.actor.net.n_params, lr=settings.lr)
        self.q1_opt = Adam(self.q1.n_params, lr=settings.lr)
        self.q2_opt = Adam(self.q2.n_params, lr=settings.lr)
        self.auto_alpha = settings.alpha == "auto"
        self.log_alpha = np.zeros(1) if self.auto_alpha else np.log([max(float(settings.alpha), 1e-12)])
        self.alpha_opt = Adam(1, lr=settings.lr)
        self.target_entropy = (settings.target_entropy if settings.target_entropy is not None
                               else -float(action_dim))
        self.replay = ReplayBuffer(settings.buffer_size, state_dim, action_dim)
        self.start_steps = settings.start_steps
        self._action_low = np.asarray(action_low, dtype=float)
        self._action_high = np.asarray(action_high, dtype=float)
        self._steps_seen = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    def scale_states(self, states) -> np.ndarray:
        return np.atleast_2d(np.asarray(states, dtype=float)) / self.state_scale

    def propose(self, state, rng: np.random.Generator, greedy: bool = False):
        if greedy:
            return self.actor.mean_action(self.scale_states(state))[0]
        if self._steps_seen < self.start_steps:
            return rng.uniform(self._action_low, self._action_high)
        actions, _, _ = self.actor.sample(self.scale_states(state), rng)
        return actions[0]

    def act(self, state):
        return self.actor.mean_action(self.scale_states(state))[0]

    def store(self, state, proposed_action, reward, next_state, done) -> None:
        self.replay.store(state, np.asarray(proposed_action, dtype=float).reshape(-1),
                          reward, next_state, done)
        self._steps_seen += 1

    def ready(self) -> bool:
        return len(self.replay) >= self.settings.batch_size and self._steps_seen >= self.start_steps

    def update(self, rng: np.random.Generator) -> dict | None:
        if not self.ready():
            return None
        batch = self.replay.sample(rng, self.settings.batch_size)
        return sac_update(self, batch, rng)

    def save(self, path) -> Path:
        from .nets import save_mlps

        meta = {"kind": "sac", "state_dim": self.state_dim, "action_dim": self.action_dim,
                "state_scale": list(self.state_scale),
                "action_low": list(self._action_low), "action_high": list(self._action_high),
                "log_alpha": float(self.log_alpha[0]), "auto_alpha": self.auto_alpha,
                "gamma": self.settings.gamma}
        return save_mlps(path, {"actor": self.actor.net, "q1": self.q1, "q2": self.q2,
                                "q1_target": self.q1_target, "q2_target": self.q2_target}, meta)

    @classmethod
    def load(cls, path) -> "SacLearner":
        from .nets import SquashedGaussianPolicy, load_mlps

        nets, meta = load_mlps(path)
        if meta.get("kind") != "sac":
            raise ValueError(f"{path} is not a SAC checkpoint")
        hidden = tuple(nets["q1"].layer_sizes[1:-1])
        settings = SacSettings(hidden=hidden, activation=nets["q1"].activation,
                               gamma=meta["gamma"],
                               alpha="auto" if meta["auto_alpha"] else float(np.exp(meta["log_alpha"])))
        learner = cls(int(meta["state_dim"]), int(meta["action_dim"]), meta["action_low"],
                      meta["action_high"], meta["state_scale"], settings)
        learner.actor = SquashedGaussianPolicy(nets["actor"], np.asarray(meta["action_low"]),
                                               np.asarray(meta["action_high"]))
        learner.q1, learner.q2 = nets["q1"], nets["q2"]
        learner.q1_target, learner.q2_target = nets["q1_target"], nets["q2_target"]
        learner.log_alpha = np.array([meta["log_alpha"]])
        learner.actor_opt = Adam(learner.actor.net.n_params, lr=settings.lr)
        learner.q1_opt = Adam(learner.q1.n_params, lr=settings.lr)
        learner.q2_opt = Adam(learner.q2.n_params, lr=settings.lr)
        return learner


def sac_update(learner: SacLearner, batch: dict, rng: np.random.Generator) -> dict:
    """One gradient step on critics, actor and temperature.

    The critic target separates its reward-driven part from the entropy
    bonus so the two can be inspected independently.
    """
    s = learner.scale_states(batch["states"])
    sn = learner.scale_states(batch["next_states"])
    a = np.atleast_2d(batch["actions"])
    r = batch["rewards"]
    done = batch["dones"]
    gamma = learner.settings.gamma
    alpha = learner.alpha
    n = len(r)

    next_actions, next_logp, _ = learner.actor.sample(sn, rng)
    xn = np.concatenate([sn, next_actions], axis=1)
    qn = np.minimum(learner.q1_target(xn)[:, 0], learner.q2_target(xn)[:, 0])
    target_reward_part = r + gamma * (1.0 - done) * qn
    entropy_part = -gamma * (1.0 - done) * alpha * next_logp
    target = target_reward_part + entropy_part

    x = np.concatenate([s, a], axis=1)
    losses = {}
    for name, net, opt in (("q1", learner.q1, learner.q1_opt),
                           ("q2", learner.q2, learner.q2_opt)):
        out, cache = net.forward(x)
        err = out[:, 0] - target
        losses[f"loss_{name}"] = float(np.mean(err ** 2))
        grad, _ = net.backward(cache, (2.0 * err / n)[:, None])
        net.params = opt.step(net.params, grad)

    # actor: minimize mean(alpha * log pi - min_q) over reparameterized draws
    actions_pi, logp_pi, cache_pi = learner.actor.sample(s, rng)
    xp = np.concatenate([s, actions_pi], axis=1)
    out1, c1 = learner.q1.forward(xp)
    out2, c2 = learner.q2.forward(xp)
    q1v, q2v = out1[:, 0], out2[:, 0]
    pick1 = (q1v <= q2v).astype(float)
    up1 = (-pick1 / n)[:, None]
    up2 = (-(1.0 - pick1) / n)[:, None]
    _, gin1 = learner.q1.backward(c1, up1)
    _, gin2 = learner.q2.backward(c2, up2)
    grad_action = (gin1 + gin2)[:, learner.state_dim:]
    grad_logp = np.full(n, alpha / n)
    actor_grad = learner.actor.backward_sample(cache_pi, grad_action=grad_action,
                                               grad_log_prob=grad_logp)
    learner.actor.net.params = learner.actor_opt.step(learner.actor.net.params, actor_grad)
    losses["loss_actor"] = float(np.mean(alpha * logp_pi - np.minimum(q1v, q2v)))

    if learner.auto_alpha:
        alpha_grad = np.array([-np.mean(logp_pi + learner.target_entropy) * learner.alpha])
        learner.log_alpha = learner.alpha_opt.step(learner.log_alpha, alpha_grad)
        learner.log_alpha = np.maximum(learner.log_alpha, np.log(1e-6))

    rate = learner.settings.target_rate
    learner.q1_target.params = (1.0 - rate) * learner.q1_target.params + rate * learner.q1.params
    learner.q2_target.params = (1.0 - rate) * learner.q2_target.params + rate * learner.q2.params

    losses["alpha"] = learner.alpha
    losses["target_mean"] = float(np.mean(target))
    losses["target_reward_part_mean"] = float(np.mean(target_reward_part))
    losses["target_entropy_part_mean"] = float(np.mean(entropy_part))
    for value in losses.values():
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite quantity in SAC update: {losses}")
    return losses


@dataclass
class QLearnSettings:
    alpha: float = 0.2
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 10_000
    # optimistic start: with terminating violations, a zero table makes "end
    # the episode" beat undiscovered goals; optimism keeps exploration alive
    optimistic_init: float = 1.0


class TabularQLearner:
    """Epsilon-greedy one-step Q-learning for discrete environments."""

    def __init__(self, n_states: int, n_actions: int, state_index_fn,
                 settings: QLearnSettings, seed: int = 0):
        del seed  # the table init is deterministic; kept for interface parity
        self.q = np.full((n_states, n_actions), float(settings.optimistic_init))
        self.state_index_fn = state_index_fn
        self.settings = settings
        self.start_steps = 0
        self._steps_seen = 0
        self._pending = None

    def epsilon(self) -> float:
        s = self.settings
        frac = min(1.0, self._steps_seen / max(1, s.eps_decay_steps))
        return s.eps_start + frac * (s.eps_end - s.eps_start)

    def propose(self, state, rng: np.random.Generator, greedy: bool = False) -> int:
        si = self.state_index_fn(state)
        if not greedy and rng.random() < self.epsilon():
            return int(rng.integers(self.q.shape[1]))
        row = self.q[si]
        return int(np.argmax(row))

    def act(self, state) -> int:
        return int(np.argmax(self.q[self.state_index_fn(state)]))

    def store(self, state, proposed_action, reward, next_state, done) -> None:
        self._pending = (state, int(proposed_action), reward, next_state, done)
        self._steps_seen += 1

    def ready(self) -> bool:
        return self._pending is not None

    def update(self, rng: np.random.Generator) -> dict | None:
        del rng
        if self._pending is None:
            return None
        state, action, reward, next_state, done = self._pending
        self._pending = None
        return q_learning_update(self, state, action, reward, next_state, done)

    def save(self, path) -> Path:
        path = Path(path)
        np.savez(path, kind=np.array("qlearn"), q=self.q,
                 settings=np.array([self.settings.alpha, self.settings.gamma,
                                    self.settings.eps_start, self.settings.eps_end,
                                    float(self.settings.eps_decay_steps)]))
        return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")

    @classmethod
    def load(cls, path, state_index_fn) -> "TabularQLearner":
        with np.load(path) as data:
            if str(data["kind"]) != "qlearn":
                raise ValueError(f"{path} is not a tabular Q checkpoint")
            q = data["q"]
            alpha, gamma, eps_start, eps_end, eps_decay = data["settings"]
        settings = QLearnSettings(alpha=float(alpha), gamma=float(gamma),
                                  eps_start=float(eps_start), eps_end=float(eps_end),
                                  eps_decay_steps=int(eps_decay))
        learner = cls(q.shape[0], q.shape[1], state_index_fn, settings)
        learner.q = q.astype(float)
        return learner


def q_learning_update(learner: TabularQLearner, state, action: int, reward: float,
                      next_state, done: bool) -> dict:
    """Standard one-step max backup on the table."""
    s = learner.state_index_fn(state)
    sn = learner.state_index_fn(next_state)
    target = reward + learner.settings.gamma * (0.0 if done else float(learner.q[sn].max()))
    td = target - learner.q[s, action]
    learner.q[s, action] += learner.settings.alpha * td
    return {"td_error": float(td)}


# ---------------------------------------------------------------------------
# training loop and trace
# ---------------------------------------------------------------------------

class TrainTrace:
    """Per-step training log with CSV round-trip and aggregate views."""

    COLUMNS = ("step", "episode", "reward", "cost", "corrected", "epsilon", "seed")

    def __init__(self, steps, episodes, rewards, costs, corrected, epsilon: float, seed: int):
        self.steps = np.asarray(steps, dtype=np.int64)
        self.episodes = np.asarray(episodes, dtype=np.int64)
        self.rewards = np.asarray(rewards, dtype=float)
        self.costs = np.asarray(costs, dtype=np.int64)
        self.corrected = np.asarray(corrected, dtype=bool)
        self.epsilon = float(epsilon)
        self.seed = int(seed)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def total_violations(self) -> int:
        return int(self.costs.sum())

    @property
    def corrected_ratio(self) -> float:
        return float(self.corrected.mean()) if len(self) else 0.0

    def episode_returns(self) -> np.ndarray:
        if not len(self):
            return np.zeros(0)
        return np.bincount(self.episodes, weights=self.rewards)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for i in range(len(self)):
                writer.writerow([self.steps[i], self.episodes[i], repr(float(self.rewards[i])),
                                 self.costs[i], int(self.corrected[i]),
                                 repr(self.epsilon), self.seed])
        return path

    @classmethod
    def from_csv(cls, path) -> "TrainTrace":
        with Path(path).open(newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
        if not rows:
            return cls([], [], [], [], [], epsilon=0.0, seed=0)
        return cls(
            steps=[int(r["step"]) for r in rows],
            episodes=[int(r["episode"]) for r in rows],
            rewards=[float(r["reward"]) for r in rows],
            costs=[int(r["cost"]) for r in rows],
            corrected=[int(r["corrected"]) for r in rows],
            epsilon=float(rows[0]["epsilon"]),
            seed=int(rows[0]["seed"]),
        )


@dataclass
class OnlineResult:
    learner: object
    trace: TrainTrace
    transitions: TransitionBatch | None = None


def train_online(env, shield, learner, n_steps: int, seed: int = 0,
                 update_ratio: int = 1, keep_transitions: bool = False) -> OnlineResult:
    """Run the shielded interaction loop for ``n_steps`` environment steps.

    Resets happen when the previous step terminated the episode or the task
    horizon ran out.  Every stored transition carries the proposed action;
    the shield (if any) is asserted unchanged at the end.
    """
    rng = np.random.default_rng(seed)
    horizon = env.spec.horizon
    hash_before = shield.params_hash() if shield is not None else None
    epsilon = shield.epsilon_safe if shield is not None else float("inf")

    steps, episodes, rewards, costs, corrected_flags = [], [], [], [], []
    transitions = {k: [] for k in ("s", "pa", "ea", "ns", "r", "c", "d", "cor", "eid")} \
        if keep_transitions else None

    state = env.reset(seed=int(rng.integers(2 ** 31)))
    episode = 0
    ep_len = 0
    needs_reset = False
    for step in range(1, n_steps + 1):
        if needs_reset or ep_len >= horizon:
            state = env.reset(seed=int(rng.integers(2 ** 31)))
            episode += 1
            ep_len = 0
            needs_reset = False
        proposed = learner.propose(state, rng)
        executed, was_corrected = behavior_correct(shield, state, proposed)
        next_state, reward, cost, done = env.step(executed)
        learner.store(state, proposed, reward, next_state, done)
        for _ in range(update_ratio):
            learner.update(rng)
        steps.append(step)
        episodes.append(episode)
        rewards.append(reward)
        costs.append(cost)
        corrected_flags.append(was_corrected)
        if transitions is not None:
            transitions["s"].append(state)
            transitions["pa"].append(encode_action(env, proposed))
            transitions["ea"].append(encode_action(env, executed))
            transitions["ns"].append(next_state)
            transitions["r"].append(reward)
            transitions["c"].append(cost)
            transitions["d"].append(done)
            transitions["cor"].append(was_corrected)
            transitions["eid"].append(episode)
        state = next_state
        ep_len += 1
        needs_reset = done

    if shield is not None and shield.params_hash() != hash_before:
        raise ShieldMutationError("shield parameters changed during online training")

    trace = TrainTrace(steps, episodes, rewards, costs, corrected_flags,
                       epsilon=epsilon, seed=seed)
    batch = None
    if transitions is not None:
        batch = TransitionBatch(
            states=np.stack(transitions["s"]), proposed_actions=np.stack(transitions["pa"]),
            executed_actions=np.stack(transitions["ea"]), next_states=np.stack(transitions["ns"]),
            rewards=transitions["r"], costs=transitions["c"], dones=transitions["d"],
            corrected=transitions["cor"], episode_ids=transitions["eid"],
        )
    return OnlineResult(learner=learner, trace=trace, transitions=batch)
