import numpy as np
import pytest

from deadend_rl.core import (CriticDivergenceError, SmdpSpec, StateLabel, Transition,
                             TransitionBatch, cost_indicator, is_action_admissible)


class TestCostIndicator:
    def test_fail_costs_one(self):
        assert cost_indicator(StateLabel.FAIL) == 1

    def test_safe_costs_nothing(self):
        assert cost_indicator(StateLabel.SAFE) == 0

    def test_dead_end_costs_nothing_until_failure(self):
        assert cost_indicator(StateLabel.DEAD_END) == 0

    def test_rejects_non_labels(self):
        with pytest.raises(TypeError):
            cost_indicator("fail")


class TestAdmissibility:
    def test_below_threshold_passes(self):
        assert is_action_admissible(0.1, 0.7) is True

    def test_tie_is_unsafe(self):
        assert is_action_admissible(0.7, 0.7) is False

    def test_zero_cost_always_admissible(self):
        assert is_action_admissible(0.0, 1e-9) is True

    def test_non_finite_critic_is_an_error(self):
        with pytest.raises(CriticDivergenceError):
            is_action_admissible(float("nan"), 0.5)
        with pytest.raises(CriticDivergenceError):
            is_action_admissible(float("inf"), 0.5)

    def test_threshold_must_be_positive(self):
        with pytest.raises(ValueError):
            is_action_admissible(0.1, 0.0)


class TestSmdpSpec:
    def _spec(self, **kwargs):
        base = dict(state_dim=2, action_dim=1, action_low=[-1.0], action_high=[1.0],
                    gamma=0.99, gamma_safe=0.9, horizon=100)
        base.update(kwargs)
        return SmdpSpec(**base)

    def test_valid_spec(self):
        spec = self._spec()
        assert spec.horizon == 100

    def test_gamma_safe_one_allowed(self):
        assert self._spec(gamma_safe=1.0).gamma_safe == 1.0

    def test_gamma_must_be_below_one(self):
        with pytest.raises(ValueError):
            self._spec(gamma=1.0)

    def test_bounds_must_be_ordered(self):
        with pytest.raises(ValueError):
            self._spec(action_low=[1.0], action_high=[1.0])


class TestTransition:
    def _transition(self, **kwargs):
        base = dict(state=[0.0], proposed_action=[0.1], executed_action=[0.1],
                    next_state=[1.0], reward=0.5, cost=0, done=False)
        base.update(kwargs)
        return Transition(**base)

    def test_violation_must_terminate(self):
        with pytest.raises(ValueError):
            self._transition(cost=1, done=False)

    def test_cost_must_be_binary(self):
        with pytest.raises(ValueError):
            self._transition(cost=2, done=True)

    def test_corrected_action_may_coincide(self):
        t = self._transition(corrected=True)
        assert np.array_equal(t.proposed_action, t.executed_action)


def _small_batch(n=6, state_dim=2, action_dim=1, seed=0):
    rng = np.random.default_rng(seed)
    costs = np.zeros(n, dtype=int)
    costs[-1] = 1
    dones = costs.astype(bool)
    return TransitionBatch(
        states=rng.normal(size=(n, state_dim)),
        proposed_actions=rng.normal(size=(n, action_dim)),
        executed_actions=rng.normal(size=(n, action_dim)),
        next_states=rng.normal(size=(n, state_dim)),
        rewards=rng.normal(size=n),
        costs=costs,
        dones=dones,
        corrected=np.zeros(n, dtype=bool),
    )


class TestTransitionBatch:
    def test_rejects_violation_without_done(self):
        with pytest.raises(ValueError):
            TransitionBatch(states=[[0.0]], proposed_actions=[[0.0]],
                            executed_actions=[[0.0]], next_states=[[0.0]],
                            rewards=[0.0], costs=[1], dones=[False], corrected=[False])

    def test_npz_round_trip(self, tmp_path):
        batch = _small_batch()
        path = tmp_path / "batch.npz"
        batch.save_npz(path)
        loaded = TransitionBatch.load_npz(path)
        np.testing.assert_array_equal(loaded.states, batch.states)
        np.testing.assert_array_equal(loaded.costs, batch.costs)
        np.testing.assert_array_equal(loaded.episode_ids, batch.episode_ids)

    def test_csv_header_layout(self):
        batch = _small_batch(state_dim=2, action_dim=1)
        header = batch.csv_header()
        assert header == ["state0", "state1", "proposed_action0", "executed_action0",
                          "next_state0", "next_state1", "reward", "cost", "done", "corrected"]

    def test_csv_round_trip_bit_exact(self, tmp_path):
        batch = _small_batch()
        path = tmp_path / "batch.csv"
        batch.write_csv(path)
        loaded = TransitionBatch.read_csv(path)
        np.testing.assert_array_equal(loaded.states, batch.states)
        np.testing.assert_array_equal(loaded.rewards, batch.rewards)
        np.testing.assert_array_equal(loaded.dones, batch.dones)

    def test_save_writes_binary_and_mirror(self, tmp_path):
        batch = _small_batch()
        npz_path, csv_path = batch.save(tmp_path / "transitions")
        assert npz_path.exists() and csv_path.exists()

    def test_from_transitions(self):
        transitions = [Transition(state=[float(i)], proposed_action=[0.0],
                                  executed_action=[0.0], next_state=[float(i + 1)],
                                  reward=1.0, cost=0, done=False) for i in range(3)]
        batch = TransitionBatch.from_transitions(transitions)
        assert len(batch) == 3
        assert batch.state_dim == 1
