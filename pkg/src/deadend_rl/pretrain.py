"""Offline phase: data collection, safety critic, recovery policy.

The critic pair (Q over state-action, V over state) is trained from logged
transitions only.  V regresses toward a low expectile of Q over the actions
present in the data, and Q bootstraps through V, so no out-of-distribution
action is ever priced by the critic during its own training.  The recovery
policy then descends the critic by a reparameterized pathwise gradient, which
deliberately may propose actions outside the data.

Baseline arms kept for comparison:

* ``rrl``      : critic evaluates a fixed task policy (one-step greedy
                  recovery on top of it),
* ``rrl_msdp`` : critic bootstraps through the recovery policy itself,
                  without the expectile mechanism,
* ``dearrl_iql``:  expectile critic, but the policy is extracted by
                  advantage-weighted regression over dataset actions only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import TransitionBatch
from .nets import Adam, Mlp, SquashedGaussianPolicy, load_mlps, make_policy_net, save_mlps

PROVENANCE_RANDOM = "random"
PROVENANCE_REPLAY = "task-replay"
PROVENANCE_COVERAGE = "coverage"


class FrozenPolicyError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# offline dataset
# ---------------------------------------------------------------------------

class OfflineDataset:
    """Ordered transitions with episode boundaries and per-episode provenance."""

    def __init__(self, batch: TransitionBatch, provenance: dict[int, str]):
        self.batch = batch
        self.provenance = {int(k): str(v) for k, v in provenance.items()}
        self._validate()

    def _validate(self):
        ids = self.batch.episode_ids
        for eid in np.unique(ids):
            if int(eid) not in self.provenance:
                raise ValueError(f"episode {eid} has no provenance tag")
            mask = ids == eid
            costs = self.batch.costs[mask]
            if costs.sum() > 1:
                raise ValueError(f"episode {eid} has multiple violations")
            if costs.sum() == 1 and costs[-1] != 1:
                raise ValueError(f"episode {eid} does not end at its violation")

    def __len__(self) -> int:
        return len(self.batch)

    @property
    def n_episodes(self) -> int:
        return len(np.unique(self.batch.episode_ids))

    def episode_slices(self) -> list[tuple[int, np.ndarray]]:
        ids = self.batch.episode_ids
        return [(int(eid), np.flatnonzero(ids == eid)) for eid in np.unique(ids)]

    def provenance_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for eid, idx in self.episode_slices():
            tag = self.provenance[eid]
            counts[tag] = counts.get(tag, 0) + len(idx)
        return counts

    def save(self, path) -> Path:
        path = Path(path)
        eids = sorted(self.provenance)
        np.savez(
            path,
            states=self.batch.states, proposed_actions=self.batch.proposed_actions,
            executed_actions=self.batch.executed_actions, next_states=self.batch.next_states,
            rewards=self.batch.rewards, costs=self.batch.costs, dones=self.batch.dones,
            corrected=self.batch.corrected, episode_ids=self.batch.episode_ids,
            provenance_eids=np.array(eids, dtype=np.int64),
            provenance_tags=np.array([self.provenance[e] for e in eids]),
        )
        return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")

    @classmethod
    def load(cls, path) -> "OfflineDataset":
        with np.load(path) as data:
            batch = TransitionBatch(
                data["states"], data["proposed_actions"], data["executed_actions"],
                data["next_states"], data["rewards"], data["costs"], data["dones"],
                data["corrected"], data["episode_ids"],
            )
            provenance = {int(e): str(t) for e, t in
                          zip(data["provenance_eids"], data["provenance_tags"])}
        return cls(batch, provenance)


def _roll_episodes(env, action_source, n_transitions: int, rng: np.random.Generator,
                   first_episode_id: int, provenance: str):
    """Roll episodes until ``n_transitions`` are gathered; returns rows."""
    from .envs import encode_action  # local import to avoid a cycle

    rows = {k: [] for k in ("s", "a", "ns", "r", "c", "d", "eid")}
    eid = first_episode_id
    collected = 0
    horizon = env.spec.horizon
    while collected < n_transitions:
        state = env.reset(seed=int(rng.integers(2 ** 31)))
        for _ in range(horizon):
            action = action_source(state, rng)
            next_state, reward, cost, done = env.step(action)
            enc = encode_action(env, action)
            rows["s"].append(state)
            rows["a"].append(enc)
            rows["ns"].append(next_state)
            rows["r"].append(reward)
            rows["c"].append(cost)
            rows["d"].append(done)
            rows["eid"].append(eid)
            state = next_state
            collected += 1
            if done or collected >= n_transitions:
                break
        eid += 1
    provenance_map = {e: provenance for e in range(first_episode_id, eid)}
    return rows, eid, provenance_map


def random_action_source(env):
    """Uniform action sampler in the environment's native action space."""
    if getattr(env, "discrete_actions", None) is not None:
        n = len(env.discrete_actions)
        return lambda state, rng: int(rng.integers(n))
    low, high = env.spec.action_low, env.spec.action_high
    return lambda state, rng: rng.uniform(low, high)


def collect_offline(env, task_policy_source=None, n_random: int = 0, n_replay: int = 0,
                    seed: int = 0) -> OfflineDataset:
    """Gather an offline dataset from random rollouts plus task-policy replay.

    ``task_policy_source`` is a callable ``(state, rng) -> native action``
    used for the replay-provenance portion; it is typically the stochastic
    actor of a task learner.
    """
    if n_random <= 0 and n_replay <= 0:
        raise ValueError("nothing to collect")
    if n_replay > 0 and task_policy_source is None:
        raise ValueError("replay collection needs a task policy source")
    rng = np.random.default_rng(seed)
    all_rows = None
    provenance: dict[int, str] = {}
    eid = 0
    for count, source, tag in ((n_random, random_action_source(env), PROVENANCE_RANDOM),
                               (n_replay, task_policy_source, PROVENANCE_REPLAY)):
        if count <= 0:
            continue
        rows, eid, prov = _roll_episodes(env, source, count, rng, eid, tag)
        provenance.update(prov)
        if all_rows is None:
            all_rows = rows
        else:
            for k in all_rows:
                all_rows[k].extend(rows[k])
    batch = TransitionBatch(
        states=np.stack(all_rows["s"]), proposed_actions=np.stack(all_rows["a"]),
        executed_actions=np.stack(all_rows["a"]), next_states=np.stack(all_rows["ns"]),
        rewards=all_rows["r"], costs=all_rows["c"], dones=all_rows["d"],
        corrected=np.zeros(len(all_rows["r"]), dtype=bool), episode_ids=all_rows["eid"],
    )
    return OfflineDataset(batch, provenance)


def filter_pre_violation(dataset: OfflineDataset, k: int = 100) -> OfflineDataset:
    """Keep only the last ``k`` transitions of each episode ending in a violation.

    Episodes without a violation pass through untouched: the safe coverage is
    what lets the critic find actions that stay out of trouble.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    keep: list[np.ndarray] = []
    for eid, idx in dataset.episode_slices():
        if dataset.batch.costs[idx].sum() == 1:
            keep.append(idx[-k:])
        else:
            keep.append(idx)
    order = np.concatenate(keep)
    order.sort()
    return OfflineDataset(dataset.batch.select(order), dict(dataset.provenance))


def tabular_coverage_dataset(smdp, encode_state_fn, action_encodings) -> OfflineDataset:
    """One transition per (non-failure state, action) pair of a finite model.

    This is the full-coverage substrate for checking how close the learned
    critic gets to the exact one.
    """
    action_encodings = np.atleast_2d(np.asarray(action_encodings, dtype=float))
    rows_s, rows_a, rows_ns, rows_c = [], [], [], []
    for s in range(smdp.n_states):
        if smdp.fail[s]:
            continue
        for a in range(smdp.n_actions):
            ns = int(smdp.successor[s, a])
            rows_s.append(encode_state_fn(s))
            rows_a.append(action_encodings[a])
            rows_ns.append(encode_state_fn(ns))
            rows_c.append(1 if smdp.fail[ns] else 0)
    n = len(rows_s)
    costs = np.asarray(rows_c)
    batch = TransitionBatch(
        states=np.stack(rows_s), proposed_actions=np.stack(rows_a),
        executed_actions=np.stack(rows_a), next_states=np.stack(rows_ns),
        rewards=np.zeros(n), costs=costs, dones=costs == 1,
        corrected=np.zeros(n, dtype=bool), episode_ids=np.arange(n),
    )
    return OfflineDataset(batch, {i: PROVENANCE_COVERAGE for i in range(n)})


# ---------------------------------------------------------------------------
# critic and recovery policy
# ---------------------------------------------------------------------------

@dataclass
class PretrainSettings:
    n_steps: int
    batch_size: int = 256
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    lr: float = 3e-4
    expectile_tau: float = 0.9
    gamma_safe: float = 0.9
    target_rate: float = 0.005
    awr_beta: float = 3.0
    awr_weight_clip: float = 100.0
    init_cost: float = 0.85
    tau_anneal_fraction: float = 0.5
    lr_final: float | None = None
    report_every: int = 1000

    def __post_init__(self):
        if not (0.0 < self.expectile_tau < 1.0):
            raise ValueError("expectile_tau must be in (0, 1)")
        if not (0.0 <= self.gamma_safe <= 1.0):
            raise ValueError("gamma_safe must be in [0, 1]")
        if not (0.0 < self.init_cost < 1.0):
            raise ValueError("init_cost must be in (0, 1)")


class SafetyCritic:
    """Paired cost functions: Q over (state, action) and V over state.

    Both heads are sigmoid-bounded since discounted binary cost lives in
    [0, 1], and both start pessimistic (``init_cost``): everything is
    presumed dangerous until the data argues otherwise.  Descending is also
    the fast direction of the low-expectile objective, so the pessimistic
    start is what lets deep dead-end value ladders settle.  ``target_q`` is
    an exponential moving average of the Q parameters; only the baseline
    arms bootstrap through it.
    """

    def __init__(self, state_dim: int, action_dim: int, state_scale,
                 settings: PretrainSettings, rng: np.random.Generator):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.state_scale = np.asarray(state_scale, dtype=float)
        self.gamma_safe = settings.gamma_safe
        self.expectile_tau = settings.expectile_tau
        self.target_rate = settings.target_rate
        hidden = tuple(settings.hidden)
        bias = float(np.log(settings.init_cost / (1.0 - settings.init_cost)))
        self.q_net = Mlp([state_dim + action_dim, *hidden, 1], settings.activation,
                         "sigmoid", rng=rng, final_bias=bias)
        self.v_net = Mlp([state_dim, *hidden, 1], settings.activation, "sigmoid",
                         rng=rng, final_bias=bias)
        self.target_q = self.q_net.copy()
        self.q_opt = Adam(self.q_net.n_params, lr=settings.lr)
        self.v_opt = Adam(self.v_net.n_params, lr=settings.lr)

    def scale_states(self, states: np.ndarray) -> np.ndarray:
        return np.atleast_2d(np.asarray(states, dtype=float)) / self.state_scale

    def q_value(self, states, actions) -> np.ndarray:
        x = np.concatenate([self.scale_states(states), np.atleast_2d(actions)], axis=1)
        return self.q_net(x)[:, 0]

    def q_target_value(self, states, actions) -> np.ndarray:
        x = np.concatenate([self.scale_states(states), np.atleast_2d(actions)], axis=1)
        return self.target_q(x)[:, 0]

    def v_value(self, states) -> np.ndarray:
        return self.v_net(self.scale_states(states))[:, 0]

    def sync_target(self) -> None:
        r = self.target_rate
        self.target_q.params = (1.0 - r) * self.target_q.params + r * self.q_net.params

    def save(self, path, meta: dict | None = None) -> Path:
        payload = {"state_scale": list(self.state_scale), "gamma_safe": self.gamma_safe,
                   "expectile_tau": self.expectile_tau, "target_rate": self.target_rate,
                   "state_dim": self.state_dim, "action_dim": self.action_dim}
        payload.update(meta or {})
        return save_mlps(path, {"q": self.q_net, "v": self.v_net, "target_q": self.target_q},
                         payload)

    @classmethod
    def load(cls, path) -> "SafetyCritic":
        nets, meta = load_mlps(path)
        settings = PretrainSettings(
            n_steps=0, gamma_safe=meta["gamma_safe"], expectile_tau=meta["expectile_tau"],
            target_rate=meta["target_rate"])
        critic = cls.__new__(cls)
        critic.state_dim = int(meta["state_dim"])
        critic.action_dim = int(meta["action_dim"])
        critic.state_scale = np.asarray(meta["state_scale"], dtype=float)
        critic.gamma_safe = settings.gamma_safe
        critic.expectile_tau = settings.expectile_tau
        critic.target_rate = settings.target_rate
        critic.q_net = nets["q"]
        critic.v_net = nets["v"]
        critic.target_q = nets["target_q"]
        critic.q_opt = Adam(critic.q_net.n_params)
        critic.v_opt = Adam(critic.v_net.n_params)
        return critic


class RecoveryPolicy:
    """Squashed Gaussian trained to minimize the safety critic; freezable."""

    def __init__(self, state_dim: int, action_dim: int, action_low, action_high,
                 state_scale, settings: PretrainSettings, rng: np.random.Generator):
        self.state_scale = np.asarray(state_scale, dtype=float)
        self.action_low = np.asarray(action_low, dtype=float)
        self.action_high = np.asarray(action_high, dtype=float)
        net = make_policy_net(state_dim, action_dim, tuple(settings.hidden),
                              settings.activation, rng)
        self.policy = SquashedGaussianPolicy(net, self.action_low, self.action_high)
        self.opt = Adam(net.n_params, lr=settings.lr)
        self.frozen = False

    def freeze(self) -> None:
        self.frozen = True

    def scale_states(self, states) -> np.ndarray:
        return np.atleast_2d(np.asarray(states, dtype=float)) / self.state_scale

    def mean_actions(self, states) -> np.ndarray:
        return self.policy.mean_action(self.scale_states(states))

    def act(self, state) -> np.ndarray:
        return self.mean_actions(state)[0]

    def sample_actions(self, states, rng: np.random.Generator) -> np.ndarray:
        actions, _, _ = self.policy.sample(self.scale_states(states), rng)
        return actions

    def apply_gradient(self, grad: np.ndarray) -> None:
        if self.frozen:
            raise FrozenPolicyError("recovery policy is frozen")
        self.policy.net.params = self.opt.step(self.policy.net.params, grad)

    def save(self, path, meta: dict | None = None) -> Path:
        payload = {"state_scale": list(self.state_scale),
                   "action_low": list(self.action_low),
                   "action_high": list(self.action_high),
                   "frozen": bool(self.frozen)}
        payload.update(meta or {})
        return save_mlps(path, {"policy": self.policy.net}, payload)

    @classmethod
    def load(cls, path) -> "RecoveryPolicy":
        nets, meta = load_mlps(path)
        policy = cls.__new__(cls)
        policy.state_scale = np.asarray(meta["state_scale"], dtype=float)
        policy.action_low = np.asarray(meta["action_low"], dtype=float)
        policy.action_high = np.asarray(meta["action_high"], dtype=float)
        policy.policy = SquashedGaussianPolicy(nets["policy"], policy.action_low,
                                               policy.action_high)
        policy.opt = Adam(policy.policy.net.n_params)
        policy.frozen = bool(meta["frozen"])
        return policy


# ---------------------------------------------------------------------------
# losses and single updates
# ---------------------------------------------------------------------------

def expectile_loss(u, tau: float):
    """Asymmetric quadratic |tau - 1(u < 0)| * u^2."""
    if not (0.0 < tau < 1.0):
        raise ValueError("tau must be in (0, 1)")
    u = np.asarray(u, dtype=float)
    weight = np.abs(tau - (u < 0.0).astype(float))
    out = weight * u ** 2
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MiniBatch:
    """A slice of dataset transitions; actions always come from the data."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    costs: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: OfflineDataset, index: np.ndarray) -> "MiniBatch":
        b = dataset.batch
        return cls(states=b.states[index], actions=b.executed_actions[index],
                   next_states=b.next_states[index], costs=b.costs[index].astype(float))


def update_v(critic: SafetyCritic, batch: MiniBatch, tau: float | None = None) -> float:
    """Expectile step for V toward Q at dataset actions.

    The residual is taken on the negated cost scale so that the configured
    tau drives V toward the *low* expectile of Q: the cheapest (safest)
    actions dominate, without ever querying Q off-data.  ``tau`` overrides
    the critic's setting (used by the annealing schedule).
    """
    q = critic.q_value(batch.states, batch.actions)
    s = critic.scale_states(batch.states)
    v_out, cache = critic.v_net.forward(s)
    v = v_out[:, 0]
    u = v - q
    tau = critic.expectile_tau if tau is None else tau
    weight = np.abs(tau - (u < 0.0).astype(float))
    loss = float(np.mean(weight * u ** 2))
    grad_v = (2.0 * weight * u / len(u))[:, None]
    grad, _ = critic.v_net.backward(cache, grad_v)
    critic.v_net.params = critic.v_opt.step(critic.v_net.params, grad)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite V loss")
    return loss


def _q_mse_step(critic: SafetyCritic, batch: MiniBatch, target: np.ndarray) -> float:
    x = np.concatenate([critic.scale_states(batch.states), np.atleast_2d(batch.actions)], axis=1)
    q_out, cache = critic.q_net.forward(x)
    q = q_out[:, 0]
    err = q - target
    loss = float(np.mean(err ** 2))
    grad_q = (2.0 * err / len(err))[:, None]
    grad, _ = critic.q_net.backward(cache, grad_q)
    critic.q_net.params = critic.q_opt.step(critic.q_net.params, grad)
    critic.sync_target()
    if not np.isfinite(loss):
        raise DivergenceError("non-finite Q loss")
    return loss


def update_q(critic: SafetyCritic, batch: MiniBatch) -> float:
    """TD step with the masked target cost + (1 - cost) * gamma_safe * V(next).

    A violating transition regresses to exactly 1; the bootstrap never looks
    at a policy action, only at V.
    """
    v_next = critic.v_value(batch.next_states)
    target = batch.costs + (1.0 - batch.costs) * critic.gamma_safe * v_next
    return _q_mse_step(critic, batch, target)


def update_q_task_policy(critic: SafetyCritic, batch: MiniBatch, task_policy,
                         rng: np.random.Generator) -> float:
    """Policy-evaluation TD step: bootstrap through the delayed Q at an action
    sampled from the supplied task policy (the baseline critic)."""
    next_actions = task_policy(batch.next_states, rng)
    q_next = critic.q_target_value(batch.next_states, next_actions)
    target = batch.costs + (1.0 - batch.costs) * critic.gamma_safe * q_next
    return _q_mse_step(critic, batch, target)


def update_q_recovery_bootstrap(critic: SafetyCritic, policy: "RecoveryPolicy",
                                batch: MiniBatch, rng: np.random.Generator) -> float:
    """Multi-step variant: bootstrap through the recovery policy being trained.

    No expectile protection here; this is the ablation arm that shows why the
    off-data bias matters.
    """
    next_actions = policy.sample_actions(batch.next_states, rng)
    q_next = critic.q_target_value(batch.next_states, next_actions)
    target = batch.costs + (1.0 - batch.costs) * critic.gamma_safe * q_next
    return _q_mse_step(critic, batch, target)


def update_recovery(policy: RecoveryPolicy, critic: SafetyCritic, batch: MiniBatch,
                    rng: np.random.Generator) -> float:
    """Pathwise step: descend Q through a reparameterized policy sample.

    Returns the objective being ascended (negative mean predicted cost).
    The critic is held fixed; only its input gradient is consulted.
    """
    s = policy.scale_states(batch.states)
    actions, _, cache = policy.policy.sample(s, rng)
    x = np.concatenate([critic.scale_states(batch.states), actions], axis=1)
    q_out, q_cache = critic.q_net.forward(x)
    q = q_out[:, 0]
    upstream = np.full((len(q), 1), 1.0 / len(q))
    _, grad_in = critic.q_net.backward(q_cache, upstream)
    grad_action = grad_in[:, critic.state_dim:]
    grad = policy.policy.backward_sample(cache, grad_action=grad_action)
    policy.apply_gradient(grad)
    objective = float(-np.mean(q))
    if not np.isfinite(objective):
        raise DivergenceError("non-finite recovery objective")
    return objective


def update_recovery_awr(policy: RecoveryPolicy, critic: SafetyCritic, batch: MiniBatch,
                        beta: float = 3.0, weight_clip: float = 100.0) -> float:
    """Advantage-weighted regression toward cheap dataset actions.

    Weights favor actions whose Q sits below V; the policy never imitates an
    action absent from the data, hence no safe fallback exists where the data
    had none.
    """
    q = critic.q_value(batch.states, batch.actions)
    v = critic.v_value(batch.states)
    weights = np.minimum(np.exp(beta * (v - q)), weight_clip)
    s = policy.scale_states(batch.states)
    log_probs = policy.policy.log_prob(s, batch.actions)
    loss = float(-np.mean(weights * log_probs))
    grad = -policy.policy.backward_log_prob(s, batch.actions, weights / len(weights))
    policy.apply_gradient(grad)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite AWR loss")
    return loss


# ---------------------------------------------------------------------------
# full pretraining loops
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    critic: SafetyCritic
    policy: RecoveryPolicy
    report: list[dict] = field(default_factory=list)


def uniform_box_policy(action_low, action_high):
    low = np.asarray(action_low, dtype=float)
    high = np.asarray(action_high, dtype=float)

    def sample(states, rng):
        return rng.uniform(low, high, (len(np.atleast_2d(states)), low.size))

    return sample


def uniform_discrete_policy(action_encodings):
    enc = np.atleast_2d(np.asarray(action_encodings, dtype=float))

    def sample(states, rng):
        idx = rng.integers(len(enc), size=len(np.atleast_2d(states)))
        return enc[idx]

    return sample


def _watchdog(history: list[float], initial: float, patience: int = 1000) -> None:
    if len(history) < patience:
        return
    recent = history[-patience:]
    if all(loss > 10.0 * max(initial, 1e-8) for loss in recent):
        raise DivergenceError("loss stayed above 10x its initial value; training diverged")


def annealed_tau(step: int, n_steps: int, tau_final: float, fraction: float) -> float:
    """Expectile level schedule: symmetric at the start, sharpened to the
    configured level over the first ``fraction`` of training.

    Starting symmetric lets V track Q while values are still propagating
    (upward moves are cheap at tau = 0.5); the late sharp phase only has to
    descend toward the low expectile, which is the heavily-weighted
    direction.
    """
    if n_steps <= 0 or fraction <= 0.0:
        return tau_final
    progress = min(1.0, step / (fraction * n_steps))
    return 0.5 + progress * (tau_final - 0.5)


def pretrain_method(dataset: OfflineDataset, method: str, settings: PretrainSettings,
                    state_scale, action_low, action_high, seed: int = 0,
                    task_policy=None, report_hook=None) -> PretrainResult:
    """Run one offline pretraining arm; returns frozen recovery components.

    Per step: sample a mini-batch, update Q, update V (expectile arms only),
    update the recovery policy.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if method in ("rrl",) and task_policy is None:
        raise ValueError("the rrl arm needs the task policy it evaluates")
    rng = np.random.default_rng(seed)
    state_dim = dataset.batch.state_dim
    action_dim = dataset.batch.action_dim
    critic = SafetyCritic(state_dim, action_dim, state_scale, settings, rng)
    policy = RecoveryPolicy(state_dim, action_dim, action_low, action_high,
                            state_scale, settings, rng)
    report: list[dict] = []
    loss_history: list[float] = []
    initial_loss = None
    for step in range(1, settings.n_steps + 1):
        if settings.lr_final is not None:
            # linear decay over the second half: steadier fixpoint polish
            frac = max(0.0, step / settings.n_steps - 0.5) * 2.0
            lr = settings.lr + frac * (settings.lr_final - settings.lr)
            critic.q_opt.lr = critic.v_opt.lr = policy.opt.lr = lr
        index = rng.integers(len(dataset), size=settings.batch_size)
        batch = MiniBatch.from_dataset(dataset, index)
        if method in ("dea_rrl", "dearrl_iql"):
            loss_q = update_q(critic, batch)
            tau = annealed_tau(step, settings.n_steps, settings.expectile_tau,
                               settings.tau_anneal_fraction)
            loss_v = update_v(critic, batch, tau=tau)
        elif method == "rrl":
            loss_q = update_q_task_policy(critic, batch, task_policy, rng)
            loss_v = 0.0
        elif method == "rrl_msdp":
            loss_q = update_q_recovery_bootstrap(critic, policy, batch, rng)
            loss_v = 0.0
        else:
            raise ValueError(f"unknown pretraining method {method!r}")
        if method == "dearrl_iql":
            objective = -update_recovery_awr(policy, critic, batch,
                                             settings.awr_beta, settings.awr_weight_clip)
        else:
            objective = update_recovery(policy, critic, batch, rng)
        total = loss_q + loss_v
        if initial_loss is None:
            initial_loss = total
        loss_history.append(total)
        _watchdog(loss_history, initial_loss)
        if step % settings.report_every == 0 or step == settings.n_steps:
            row = {"step": step, "loss_q": loss_q, "loss_v": loss_v, "objective": objective}
            if report_hook is not None:
                row.update(report_hook(critic, policy))
            report.append(row)
    policy.freeze()
    return PretrainResult(critic=critic, policy=policy, report=report)


def pretrain(dataset: OfflineDataset, settings: PretrainSettings, state_scale,
             action_low, action_high, seed: int = 0, report_hook=None) -> PretrainResult:
    """The main offline arm: expectile critic + pathwise recovery policy."""
    return pretrain_method(dataset, "dea_rrl", settings, state_scale, action_low,
                           action_high, seed=seed, report_hook=report_hook)


def rrl_baseline_pretrain(dataset: OfflineDataset, task_policy, settings: PretrainSettings,
                          state_scale, action_low, action_high, seed: int = 0,
                          report_hook=None) -> PretrainResult:
    """Baseline arm: critic evaluates the supplied task policy (one-step
    greedy recovery on top)."""
    return pretrain_method(dataset, "rrl", settings, state_scale, action_low, action_high,
                           seed=seed, task_policy=task_policy, report_hook=report_hook)


def write_pretrain_report(path, rows: list[dict]) -> Path:
    path = Path(path)
    if not rows:
        path.write_text("step\n")
        return path
    columns = list(rows[0].keys())
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path
