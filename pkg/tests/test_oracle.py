import numpy as np
import pytest

from deadend_rl.core import StateLabel
from deadend_rl.envs import CarBrakeEnv, GridHazardEnv, make_chain, tabularize
from deadend_rl.oracle import (LABEL_DEAD, LABEL_FAIL, LABEL_SAFE, EscapeCycleError,
                               TabularSMDP, certify_theorem2, compute_assumption_horizon,
                               enumerate_dead_ends, escape_times, greedy_policy_matrix,
                               policy_cost_evaluation, policy_q_values, to_state_label,
                               value_iteration_optimal, write_oracle_report)

GS = 0.9


@pytest.fixture(scope="module")
def chain():
    return make_chain(1)


@pytest.fixture(scope="module")
def grid_tab():
    return tabularize(GridHazardEnv())


@pytest.fixture(scope="module")
def car_tab():
    return tabularize(CarBrakeEnv())


class TestTabularSmdpValidation:
    def test_fail_states_must_absorb(self):
        successor = np.array([[1, 1], [0, 0]])
        with pytest.raises(ValueError):
            TabularSMDP(successor=successor, fail=np.array([False, True]),
                        initial_states=np.array([0]))

    def test_needs_live_initial_state(self):
        successor = np.array([[0, 0], [1, 1]])
        with pytest.raises(ValueError):
            TabularSMDP(successor=successor, fail=np.array([False, True]),
                        initial_states=np.array([1]))


class TestDeadEndEnumeration:
    def test_chain_partition(self, chain):
        labels = enumerate_dead_ends(chain)
        np.testing.assert_array_equal(labels, [LABEL_SAFE, LABEL_DEAD, LABEL_FAIL])

    def test_partition_totality(self, grid_tab):
        labels = enumerate_dead_ends(grid_tab)
        assert set(np.unique(labels)) <= {LABEL_SAFE, LABEL_DEAD, LABEL_FAIL}
        enums = [to_state_label(code) for code in labels]
        assert all(isinstance(e, StateLabel) for e in enums)

    def test_all_fail_neighbors_is_dead_despite_many_actions(self):
        # four actions, every one of them lands in a failure state
        successor = np.array([[0, 0, 0, 0], [2, 2, 2, 2], [2, 2, 2, 2]])
        tab = TabularSMDP(successor=successor, fail=np.array([False, False, True]),
                          initial_states=np.array([0]))
        labels = enumerate_dead_ends(tab)
        assert labels[1] == LABEL_DEAD

    def test_carbrake_matches_closed_form_off_boundary(self, car_tab):
        from deadend_rl.envs import carbrake_grid
        labels = enumerate_dead_ends(car_tab)
        d_grid, v_grid = carbrake_grid()
        D, V = np.meshgrid(d_grid, v_grid, indexing="ij")
        law = CarBrakeEnv.dead_end_closed_form(D, V) | ((D <= 0) & (V > 0))
        tab_dead = ((labels == LABEL_DEAD) | (labels == LABEL_FAIL)).reshape(50, 25)
        bin_d, bin_v = d_grid[1] - d_grid[0], v_grid[1] - v_grid[0]
        lo = np.maximum(V - bin_v, 0.0)
        hi = V + bin_v
        f_lo, f_hi = lo ** 2 / 2, hi ** 2 / 2
        dist = np.where((D >= f_lo) & (D <= f_hi), 0.0,
                        np.minimum(np.abs(D - f_lo), np.abs(D - f_hi)))
        off_boundary = dist > bin_d
        agree = (tab_dead == law)[off_boundary]
        assert agree.mean() >= 0.99


class TestEscapeTimes:
    def test_chain_one_step(self, chain):
        labels = enumerate_dead_ends(chain)
        assert compute_assumption_horizon(chain, labels) == 1

    def test_two_step_corridor(self):
        tab = make_chain(2)
        labels = enumerate_dead_ends(tab)
        esc = escape_times(tab, labels)
        np.testing.assert_array_equal(esc, [0, 2, 1, 0])
        assert compute_assumption_horizon(tab, labels) == 2

    def test_grid_chute_horizon_is_four(self, grid_tab):
        labels = enumerate_dead_ends(grid_tab)
        assert compute_assumption_horizon(grid_tab, labels) == 4

    def test_failure_free_cycle_is_a_modeling_bug(self):
        # two states feeding each other, fail state unreachable from them
        successor = np.array([[1, 1], [0, 0], [2, 2]])
        tab = TabularSMDP(successor=successor, fail=np.array([False, False, True]),
                          initial_states=np.array([0]))
        forged = np.array([LABEL_DEAD, LABEL_DEAD, LABEL_FAIL])
        with pytest.raises(EscapeCycleError):
            escape_times(tab, forged)

    def test_inconsistent_labels_rejected(self, chain):
        forged = np.array([LABEL_DEAD, LABEL_SAFE, LABEL_FAIL])
        with pytest.raises(ValueError):
            escape_times(chain, forged)


class TestValueIteration:
    def test_chain_exact_values(self, chain):
        vals = value_iteration_optimal(chain, GS)
        np.testing.assert_allclose(vals.v_star, [0.0, 1.0, 1.0], atol=1e-12)

    def test_two_step_dead_end_is_discounted_once(self):
        vals = value_iteration_optimal(make_chain(2), GS)
        assert vals.v_star[1] == pytest.approx(0.9, abs=1e-12)

    def test_lemma_pattern_everywhere(self, car_tab):
        vals = value_iteration_optimal(car_tab, GS, tol=1e-10)
        fail = vals.labels == LABEL_FAIL
        safe = vals.labels == LABEL_SAFE
        dead = vals.labels == LABEL_DEAD
        assert np.all(vals.v_star[fail] == 1.0)
        assert np.all(np.abs(vals.v_star[safe]) < 1e-10)
        lower = GS ** (vals.escape[dead] - 1)
        assert np.all(vals.v_star[dead] >= lower - 1e-10)
        assert np.all(vals.v_star[dead] <= 1.0 + 1e-12)

    def test_dead_values_equal_max_delay_power(self, grid_tab):
        # deterministic worlds: V* on a dead-end is exactly gamma^(escape - 1)
        vals = value_iteration_optimal(grid_tab, GS)
        dead = vals.labels == LABEL_DEAD
        np.testing.assert_allclose(vals.v_star[dead], GS ** (vals.escape[dead] - 1),
                                   atol=1e-9)

    def test_residuals_contract(self, car_tab):
        vals = value_iteration_optimal(car_tab, GS)
        r = vals.residuals
        assert all(r[i + 1] <= GS * r[i] + 1e-15 for i in range(len(r) - 1))

    def test_gamma_one_rejected(self, chain):
        with pytest.raises(ValueError):
            value_iteration_optimal(chain, 1.0)


class TestPolicyEvaluation:
    def test_uniform_random_on_chain(self, chain):
        # V(s0) solves V = 0.5 * 0.9 * V + 0.5 * 0.9 * 1  =>  9/11
        policy = np.full((3, 2), 0.5)
        v = policy_cost_evaluation(chain, policy, GS)
        assert v[0] == pytest.approx(9.0 / 11.0, abs=1e-9)

    def test_fail_state_value_is_one_for_any_policy(self, chain):
        rng = np.random.default_rng(1)
        policy = rng.dirichlet(np.ones(2), size=3)
        v = policy_cost_evaluation(chain, policy, GS)
        assert v[2] == pytest.approx(1.0, abs=1e-12)

    def test_optimal_policy_evaluation_matches_value_iteration(self, grid_tab):
        vals = value_iteration_optimal(grid_tab, GS)
        greedy = greedy_policy_matrix(vals.q_star)
        v = policy_cost_evaluation(grid_tab, greedy, GS)
        np.testing.assert_allclose(v, vals.v_star, atol=1e-9)

    def test_rows_must_sum_to_one(self, chain):
        with pytest.raises(ValueError):
            policy_cost_evaluation(chain, np.full((3, 2), 0.4), GS)


class TestDominance:
    @pytest.mark.parametrize("tab_name", ["chain", "grid_tab", "car_tab"])
    def test_optimal_q_pointwise_below_any_policy_q(self, tab_name, request):
        tab = request.getfixturevalue(tab_name)
        vals = value_iteration_optimal(tab, GS)
        rng = np.random.default_rng(11)
        for _ in range(5):
            policy = rng.dirichlet(np.ones(tab.n_actions), size=tab.n_states)
            v_pi = policy_cost_evaluation(tab, policy, GS)
            q_pi = policy_q_values(tab, v_pi, GS)
            assert np.all(vals.q_star <= q_pi + 1e-8)
            # hence the admissible set under Q* contains the one under Q^pi
            for eps in (0.3, 0.7):
                under_pi = q_pi < eps
                under_star = vals.q_star < eps + 1e-8
                assert np.all(under_star | ~under_pi)


class TestCertification:
    def test_chain_boundary_epsilon_passes(self, chain):
        vals = value_iteration_optimal(chain, GS)
        report = certify_theorem2(chain, vals, GS ** vals.h_dead)
        assert report.passed
        assert report.n_unsafe_entries == 0
        assert report.n_corrected >= 1

    def test_vacuous_threshold_fails(self, chain):
        vals = value_iteration_optimal(chain, GS)
        report = certify_theorem2(chain, vals, 1.1)
        assert report.n_corrected == 0
        assert report.n_unsafe_entries > 0
        assert not report.passed

    def test_carbrake_exhaustive(self, car_tab):
        vals = value_iteration_optimal(car_tab, GS)
        report = certify_theorem2(car_tab, vals, GS ** vals.h_dead)
        assert report.passed
        assert report.n_pairs_checked == (vals.labels == LABEL_SAFE).sum() * 5

    def test_summary_mentions_verdict(self, chain):
        vals = value_iteration_optimal(chain, GS)
        text = certify_theorem2(chain, vals, GS ** vals.h_dead).summary()
        assert "PASS" in text


class TestReport:
    def test_report_has_one_row_per_state(self, chain, tmp_path):
        vals = value_iteration_optimal(chain, GS)
        path = write_oracle_report(chain, vals, tmp_path / "oracle.csv")
        lines = path.read_text().strip().splitlines()
        assert len(lines) == chain.n_states + 1
        assert lines[0].startswith("state,label,escape,v_star")
