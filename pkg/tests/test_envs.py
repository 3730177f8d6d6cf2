import numpy as np
import pytest

from deadend_rl.core import EpisodeOverError
from deadend_rl.envs import (CHAIN_ACTION_ENCODINGS, CarBrakeEnv, GridHazardEnv,
                             PointMomentumEnv, carbrake_grid, carbrake_index_of_state,
                             carbrake_state_of_index, decode_action, encode_action,
                             make_chain, tabularize)
from deadend_rl.oracle import LABEL_DEAD, LABEL_FAIL, LABEL_SAFE, enumerate_dead_ends


class TestCarBrake:
    def test_reset_is_fixed_start(self):
        env = CarBrakeEnv()
        for seed in (0, 1, 17):
            np.testing.assert_array_equal(env.reset(seed), [10.0, 0.0])

    def test_braking_into_the_wall_fails(self):
        # hand application of the dynamics: v' = 2 - 0.2 = 1.8, d' = 0.1 - 0.36
        env = CarBrakeEnv()
        env.reset(0)
        env._state = np.array([0.1, 2.0])
        next_state, reward, cost, done = env.step(-1.0)
        np.testing.assert_allclose(next_state, [-0.26, 1.8])
        assert (reward, cost, done) == (0.0, 1, True)

    def test_parked_car_is_a_fixed_point(self):
        env = CarBrakeEnv()
        state = env.reset(0)
        next_state, reward, cost, done = env.step(0.0)
        np.testing.assert_array_equal(next_state, [10.0, 0.0])
        assert (reward, cost, done) == (0.0, 0, False)

    def test_reward_is_distance_covered(self):
        env = CarBrakeEnv()
        env.reset(0)
        _, reward, _, _ = env.step(1.0)
        # v' = 0.2, reward = v' * dt
        assert reward == pytest.approx(0.2 * 0.2)

    def test_step_after_done_raises(self):
        env = CarBrakeEnv()
        env.reset(0)
        env._state = np.array([0.05, 2.0])
        env.step(-1.0)
        with pytest.raises(EpisodeOverError):
            env.step(0.0)

    def test_deterministic_trajectories(self):
        actions = np.linspace(-1, 1, 40)
        rollouts = []
        for _ in range(2):
            env = CarBrakeEnv()
            state = env.reset(3)
            states = [state]
            for a in actions:
                state, *_ , done = env.step(a)
                states.append(state)
                if done:
                    break
            rollouts.append(np.stack(states))
        np.testing.assert_array_equal(rollouts[0], rollouts[1])

    def test_closed_form_law(self):
        assert CarBrakeEnv.dead_end_closed_form(0.1, 2.0)
        assert not CarBrakeEnv.dead_end_closed_form(5.0, 2.0)


class TestGridHazard:
    def test_chute_drifts_regardless_of_action(self):
        env = GridHazardEnv()
        for action in range(4):
            env.reset(0)
            env._cell = (2, 2)
            next_state, _, cost, _ = env.step(action)
            np.testing.assert_array_equal(next_state, [3, 2])
            assert cost == 0

    def test_chute_bottom_enters_hazard(self):
        env = GridHazardEnv()
        env.reset(0)
        env._cell = (5, 2)
        _, reward, cost, done = env.step(0)
        assert (reward, cost, done) == (0.0, 1, True)

    def test_goal_pays_and_ends(self):
        env = GridHazardEnv()
        env.reset(0)
        env._cell = (1, 9)
        _, reward, cost, done = env.step(3)  # right into the goal
        assert (reward, cost, done) == (1.0, 0, True)

    def test_wall_bump_stays_in_place(self):
        env = GridHazardEnv()
        state = env.reset(0)
        out = env.step(2)[0]  # left from column 1 -> column 0
        np.testing.assert_array_equal(out, [10, 0])
        out = env.step(2)[0]  # left from column 0 stays
        np.testing.assert_array_equal(out, [10, 0])

    def test_step_reward_is_small_penalty(self):
        env = GridHazardEnv()
        env.reset(0)
        _, reward, _, _ = env.step(0)
        assert reward == pytest.approx(-0.01)

    def test_start_cell_is_not_hazardous(self):
        env = GridHazardEnv()
        assert env.start not in env.hazards
        assert env.start not in env.chute


class TestGridTabular:
    def test_state_count_and_identity_discretization(self):
        env = GridHazardEnv()
        tab = tabularize(env)
        assert tab.n_states == 144
        assert tab.n_actions == 4
        # identity: moving right from the start lands where the env lands
        env.reset(0)
        nxt = env.step(3)[0]
        assert tab.successor[env.cell_index(env.start), 3] == env.state_index(nxt)

    def test_fail_mask_matches_hazards(self):
        env = GridHazardEnv()
        tab = tabularize(env)
        assert tab.fail.sum() == len(env.hazards)

    def test_chute_cells_are_dead_ends_and_rest_safe(self):
        env = GridHazardEnv()
        tab = tabularize(env)
        labels = enumerate_dead_ends(tab)
        for cell in env.chute:
            assert labels[env.cell_index(cell)] == LABEL_DEAD
        assert labels[env.cell_index(env.goal)] == LABEL_SAFE
        assert labels[env.cell_index(env.start)] == LABEL_SAFE
        # dead ends are exactly the chute
        assert (labels == LABEL_DEAD).sum() == len(env.chute)


class TestCarBrakeTabular:
    def test_default_bins_give_1250_states(self):
        tab = tabularize(CarBrakeEnv())
        assert tab.n_states == 1250
        assert tab.n_actions == 5

    def test_fail_count_is_zero_distance_moving_bins(self):
        tab = tabularize(CarBrakeEnv())
        # one column of d = 0 cells with v > 0
        assert tab.fail.sum() == 24

    def test_successors_follow_the_dynamics(self):
        env = CarBrakeEnv()
        tab = tabularize(env)
        d_grid, v_grid = carbrake_grid()
        idx = carbrake_index_of_state([5.0, 2.5])
        state = carbrake_state_of_index(idx)
        nxt, _ = env.dynamics(state, 1.0)
        expected = carbrake_index_of_state(nxt)
        assert tab.successor[idx, 4] == expected

    def test_too_few_bins_rejected(self):
        with pytest.raises(ValueError):
            tabularize(CarBrakeEnv(), bins=(1, 25))

    def test_point_env_has_no_tabularization(self):
        with pytest.raises(TypeError):
            tabularize(PointMomentumEnv())


class TestPointMomentum:
    def test_reset_starts_at_rest_and_clear(self):
        env = PointMomentumEnv()
        for seed in range(20):
            obs = env.reset(seed)
            p, u = obs[:2], obs[2:4]
            np.testing.assert_array_equal(u, [0.0, 0.0])
            for cx, cy, r in env.hazards:
                assert np.hypot(p[0] - cx, p[1] - cy) > r + env.start_clearance

    def test_velocity_and_position_update(self):
        env = PointMomentumEnv()
        env.reset(0)
        p0 = env._p.copy()
        obs, _, _, _ = env.step([1.0, 0.0])
        np.testing.assert_allclose(obs[2:4], [0.1, 0.0])
        np.testing.assert_allclose(obs[:2], p0 + 0.5 * np.array([0.1, 0.0]))

    def test_wall_contact_zeroes_velocity(self):
        env = PointMomentumEnv()
        env.reset(0)
        env._p = np.array([-0.99, 0.0])
        env._u = np.array([-0.3, 0.0])
        obs, _, _, _ = env.step([-1.0, 0.0])
        assert obs[0] == -1.0
        assert obs[2] == 0.0

    def test_hazard_contact_fails(self):
        env = PointMomentumEnv()
        env.reset(0)
        env._p = np.array([-0.35, 0.0])
        env._u = np.array([0.3, 0.0])
        _, reward, cost, done = env.step([1.0, 0.0])
        assert (reward, cost, done) == (0.0, 1, True)

    def test_goal_contact_pays_bonus(self):
        env = PointMomentumEnv()
        env.reset(0)
        env._p = np.array([0.75, 0.0])
        env._u = np.array([0.1, 0.0])
        _, reward, cost, done = env.step([0.0, 0.0])
        assert done and cost == 0
        assert reward == pytest.approx(env.GOAL_REWARD)

    def test_progress_reward_sign(self):
        env = PointMomentumEnv()
        env.reset(0)
        env._p = np.array([-0.8, 0.6])
        env._u = np.zeros(2)
        _, reward, _, _ = env.step([1.0, 0.0])  # accelerate toward goal
        assert reward > 0

    def test_drift_mode_appends_offset_dim(self):
        env = PointMomentumEnv(drift=True)
        obs = env.reset(0)
        assert obs.shape == (5,)
        assert env.spec.state_dim == 5
        env.step([0.0, 0.0])
        assert env._hazard_offset() != 0.0

    def test_static_mode_is_markov_in_four_dims(self):
        env = PointMomentumEnv()
        assert env.reset(0).shape == (4,)
        assert not env.stochastic

    def test_deterministic_given_seed(self):
        def rollout():
            env = PointMomentumEnv()
            obs = env.reset(5)
            total = 0.0
            for i in range(50):
                obs, r, c, done = env.step([np.sin(i * 0.3), np.cos(i * 0.2)])
                total += r
                if done:
                    break
            return total, obs
        t1, o1 = rollout()
        t2, o2 = rollout()
        assert t1 == t2
        np.testing.assert_array_equal(o1, o2)


class TestActionCodecs:
    def test_grid_round_trip(self):
        env = GridHazardEnv()
        for a in range(4):
            enc = encode_action(env, a)
            assert decode_action(env, enc) == a

    def test_continuous_pass_through(self):
        env = CarBrakeEnv()
        enc = encode_action(env, [-0.3])
        np.testing.assert_array_equal(enc, [-0.3])
        np.testing.assert_array_equal(decode_action(env, enc), [-0.3])


class TestChainFixture:
    def test_three_state_shape(self):
        tab = make_chain(1)
        assert tab.n_states == 3
        labels = enumerate_dead_ends(tab)
        np.testing.assert_array_equal(labels, [LABEL_SAFE, LABEL_DEAD, LABEL_FAIL])

    def test_action_encodings_are_box_corners(self):
        np.testing.assert_array_equal(CHAIN_ACTION_ENCODINGS, [[-1.0], [1.0]])
