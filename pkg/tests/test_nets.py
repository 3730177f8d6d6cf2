import json

import numpy as np
import pytest

from deadend_rl.nets import (Adam, CheckpointError, Mlp, SquashedGaussianPolicy,
                             finite_difference_grad, gradient_relative_error, load_mlps,
                             make_policy_net, save_mlps)


class FixedNoise:
    """Stands in for a Generator: replays a fixed noise matrix."""

    def __init__(self, noise):
        self.noise = np.asarray(noise, dtype=float)

    def standard_normal(self, shape):
        return self.noise[:shape[0], :shape[1]].copy()


class TestForward:
    def test_zero_weight_net_outputs_bias(self):
        net = Mlp([3, 4, 2], rng=np.random.default_rng(0))
        net.params[:] = 0.0
        w_sl, b_sl = net._slices[-1]
        net.params[b_sl] = [0.5, -1.5]
        out, _ = net.forward(np.random.default_rng(1).normal(size=(5, 3)))
        np.testing.assert_allclose(out, np.tile([0.5, -1.5], (5, 1)))

    def test_identity_linear_unit(self):
        net = Mlp([1, 1])
        net.params[:] = [1.0, 0.0]  # weight, bias
        out, _ = net.forward([[3.0]])
        assert out[0, 0] == pytest.approx(3.0)

    def test_batched_forward_matches_per_sample(self):
        net = Mlp([4, 8, 3], rng=np.random.default_rng(5))
        x = np.random.default_rng(6).normal(size=(7, 4))
        batched, _ = net.forward(x)
        rows = np.vstack([net.forward(x[i:i + 1])[0] for i in range(7)])
        np.testing.assert_allclose(batched, rows, atol=0.0)

    def test_nan_params_rejected(self):
        net = Mlp([2, 2])
        net.params[0] = np.nan
        with pytest.raises(FloatingPointError):
            net.forward([[0.0, 0.0]])

    def test_dimension_mismatch_rejected(self):
        net = Mlp([3, 2])
        with pytest.raises(ValueError):
            net.forward([[1.0, 2.0]])


class TestBackward:
    def test_linear_squared_loss_closed_form(self):
        # single linear layer, L = (w x + b - y)^2
        net = Mlp([2, 1])
        net.params[:] = [0.7, -0.3, 0.1]
        x = np.array([[1.5, -2.0]])
        y = 0.4
        out, cache = net.forward(x)
        err = out[0, 0] - y
        grad, _ = net.backward(cache, np.array([[2.0 * err]]))
        np.testing.assert_allclose(grad, [2 * err * 1.5, 2 * err * -2.0, 2 * err],
                                   atol=1e-12)

    def test_zero_upstream_gives_zero_gradient(self):
        net = Mlp([3, 5, 2], rng=np.random.default_rng(2))
        x = np.random.default_rng(3).normal(size=(4, 3))
        _, cache = net.forward(x)
        grad, grad_in = net.backward(cache, np.zeros((4, 2)))
        assert np.all(grad == 0.0)
        assert np.all(grad_in == 0.0)

    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    @pytest.mark.parametrize("output", ["identity", "sigmoid"])
    def test_matches_finite_differences(self, activation, output):
        rng = np.random.default_rng(hash((activation, output)) % 2 ** 31)
        net = Mlp([3, 12, 6, 2], activation, output, rng=rng)
        x = rng.normal(size=(4, 3))
        weights = rng.normal(size=(4, 2))

        def loss(params):
            saved = net.params
            net.params = params
            out, _ = net.forward(x)
            net.params = saved
            return float((out * weights).sum())

        _, cache = net.forward(x)
        analytic, _ = net.backward(cache, weights)
        numeric = finite_difference_grad(loss, net.params.copy())
        assert gradient_relative_error(analytic, numeric) < 1e-4

    def test_bad_upstream_shape_rejected(self):
        net = Mlp([2, 2])
        _, cache = net.forward([[0.0, 1.0]])
        with pytest.raises(ValueError):
            net.backward(cache, np.zeros((1, 3)))


class TestAdam:
    def test_quadratic_bowl_converges(self):
        # f(p) = p0^2 + 4 p1^2, minimum 0
        params = np.array([3.0, -2.0])
        opt = Adam(2, lr=3e-2)
        for _ in range(2000):
            grad = np.array([2.0 * params[0], 8.0 * params[1]])
            params = opt.step(params, grad)
        assert params[0] ** 2 + 4 * params[1] ** 2 < 1e-6

    def test_zero_gradient_keeps_params(self):
        params = np.array([1.0, 2.0])
        opt = Adam(2, lr=0.1)
        out = opt.step(params, np.zeros(2))
        np.testing.assert_array_equal(out, params)

    def test_zero_learning_rate_keeps_params(self):
        params = np.array([1.0, 2.0])
        opt = Adam(2, lr=0.0)
        out = opt.step(params, np.array([5.0, -5.0]))
        np.testing.assert_array_equal(out, params)

    def test_non_finite_gradient_rejected(self):
        opt = Adam(1)
        with pytest.raises(FloatingPointError):
            opt.step(np.zeros(1), np.array([np.inf]))


@pytest.fixture
def policy():
    rng = np.random.default_rng(9)
    net = make_policy_net(3, 2, (16, 16), "tanh", rng)
    return SquashedGaussianPolicy(net, np.array([-1.0, -2.0]), np.array([1.0, 0.5]))


class TestSquashedGaussian:
    def test_samples_stay_in_the_box(self, policy):
        rng = np.random.default_rng(0)
        states = rng.normal(size=(200, 3)) * 3
        actions, log_probs, _ = policy.sample(states, rng)
        assert np.all(actions >= [-1.0, -2.0]) and np.all(actions <= [1.0, 0.5])
        assert np.all(np.isfinite(log_probs))

    def test_degenerate_std_collapses_to_mean(self, policy):
        # push raw log-std far below the clamp floor
        w_sl, b_sl = policy.net._slices[-1]
        policy.net.params[b_sl][2:] = -50.0
        rng = np.random.default_rng(1)
        states = rng.normal(size=(50, 3))
        actions, _, _ = policy.sample(states, rng)
        np.testing.assert_allclose(actions, policy.mean_action(states), atol=0.05)

    def test_zero_net_and_symmetric_box_center_action(self):
        net = make_policy_net(2, 1, (8,), "tanh", np.random.default_rng(0))
        net.params[:] = 0.0
        pol = SquashedGaussianPolicy(net, np.array([-1.0]), np.array([1.0]))
        action, _, _ = pol.sample(np.zeros((1, 2)), deterministic=True)
        assert action[0, 0] == pytest.approx(0.0)

    def test_fixed_seed_reproduces_samples(self, policy):
        states = np.random.default_rng(2).normal(size=(10, 3))
        a1, lp1, _ = policy.sample(states, np.random.default_rng(77))
        a2, lp2, _ = policy.sample(states, np.random.default_rng(77))
        np.testing.assert_array_equal(a1, a2)
        np.testing.assert_array_equal(lp1, lp2)

    def test_deterministic_mode_needs_no_generator(self, policy):
        states = np.zeros((3, 3))
        actions, log_probs, _ = policy.sample(states, deterministic=True)
        np.testing.assert_allclose(actions, policy.mean_action(states))
        assert np.all(np.isfinite(log_probs))

    def test_stochastic_mode_requires_generator(self, policy):
        with pytest.raises(ValueError):
            policy.sample(np.zeros((1, 3)))

    def test_density_integrates_to_one(self):
        rng = np.random.default_rng(4)
        net = make_policy_net(2, 1, (8,), "tanh", rng)
        net.params[rng.integers(net.n_params, size=5)] += 0.5
        pol = SquashedGaussianPolicy(net, np.array([-2.0]), np.array([3.0]))
        state = np.array([[0.3, -0.4]])
        u = np.linspace(-9.0, 9.0, 200_001)
        grid = pol.center + pol.half * np.tanh(u)
        lp = pol.log_prob(np.repeat(state, len(grid), axis=0), grid[:, None])
        integral = np.trapezoid(np.exp(lp), grid)
        assert integral == pytest.approx(1.0, abs=1e-3)

    def test_pathwise_gradient_matches_finite_differences(self, policy):
        rng = np.random.default_rng(10)
        states = rng.normal(size=(5, 3))
        noise = rng.standard_normal((5, 2))
        wa = rng.normal(size=(5, 2))
        wl = rng.normal(size=5)
        net = policy.net

        def loss(params):
            saved = net.params
            net.params = params
            a, lp, _ = policy.sample(states, FixedNoise(noise))
            net.params = saved
            return float((a * wa).sum() + (lp * wl).sum())

        _, _, cache = policy.sample(states, FixedNoise(noise))
        analytic = policy.backward_sample(cache, grad_action=wa, grad_log_prob=wl)
        numeric = finite_difference_grad(loss, net.params.copy())
        assert gradient_relative_error(analytic, numeric) < 1e-4

    def test_log_prob_gradient_matches_finite_differences(self, policy):
        rng = np.random.default_rng(12)
        states = rng.normal(size=(5, 3))
        actions = policy.mean_action(states) * 0.6 - 0.05
        weights = rng.normal(size=5)
        net = policy.net

        def loss(params):
            saved = net.params
            net.params = params
            lp = policy.log_prob(states, actions)
            net.params = saved
            return float((weights * lp).sum())

        analytic = policy.backward_log_prob(states, actions, weights)
        numeric = finite_difference_grad(loss, net.params.copy())
        assert gradient_relative_error(analytic, numeric) < 1e-4


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        nets = {"q": Mlp([3, 8, 1], "tanh", "sigmoid", rng=rng),
                "v": Mlp([2, 8, 1], "tanh", "sigmoid", rng=rng)}
        path = save_mlps(tmp_path / "critic.npz", nets, {"gamma_safe": 0.9})
        loaded, meta = load_mlps(path)
        assert meta["gamma_safe"] == 0.9
        for name in nets:
            np.testing.assert_array_equal(loaded[name].params, nets[name].params)
            assert loaded[name].descriptor() == nets[name].descriptor()

    def test_descriptor_mismatch_fails_loudly(self, tmp_path):
        path = save_mlps(tmp_path / "net.npz", {"q": Mlp([3, 8, 1])}, {})
        with pytest.raises(CheckpointError):
            load_mlps(path, expected={"q": Mlp([3, 16, 1]).descriptor()})

    def test_missing_net_fails_loudly(self, tmp_path):
        path = save_mlps(tmp_path / "net.npz", {"q": Mlp([3, 8, 1])}, {})
        with pytest.raises(CheckpointError):
            load_mlps(path, expected={"missing": Mlp([3, 8, 1]).descriptor()})

    def test_version_mismatch_fails_loudly(self, tmp_path):
        net = Mlp([2, 2])
        path = tmp_path / "net.npz"
        np.savez(path, version=np.array(99), descriptors=np.array(json.dumps(
            {"q": net.descriptor()})), meta=np.array("{}"), params_q=net.params)
        with pytest.raises(CheckpointError):
            load_mlps(path)
