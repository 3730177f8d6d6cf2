"""Minimal differentiable function approximation on numpy.

Small fully-connected networks with hand-written reverse-mode gradients, an
adaptive-moment optimizer, a tanh-squashed diagonal Gaussian policy head,
and central finite differences for verifying every gradient path.  All
computations are float64 and bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_LOG_2PI = float(np.log(2.0 * np.pi))

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _tanh(z):
    t = np.tanh(z)
    return t, t


def _dtanh(cache):
    return 1.0 - cache ** 2


def _relu(z):
    return np.maximum(z, 0.0), z


def _drelu(cache):
    return (cache > 0.0).astype(float)


_ACTIVATIONS = {"tanh": (_tanh, _dtanh), "relu": (_relu, _drelu)}


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Mlp:
    """Fully-connected network over a flat parameter vector.

    ``output`` is "identity" for unbounded heads and "sigmoid" for heads that
    must live in [0, 1] (cost critics).
    """

    def __init__(self, layer_sizes, activation: str = "tanh", output: str = "identity",
                 rng: np.random.Generator | None = None, final_scale: float = 1.0,
                 final_bias: float = 0.0):
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if output not in ("identity", "sigmoid"):
            raise ValueError(f"unknown output activation {output!r}")
        self.activation = activation
        self.output = output
        self._slices = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            self._slices.append((w, b))
        self.n_params = offset
        rng = rng or np.random.default_rng(0)
        params = np.zeros(offset)
        for li, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            w_sl, b_sl = self._slices[li]
            scale = np.sqrt(1.0 / fan_in)
            if li == len(self._slices) - 1:
                scale *= final_scale
                params[b_sl] = final_bias
            params[w_sl] = rng.normal(0.0, scale, fan_in * fan_out)
        self.params = params

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def descriptor(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation,
                "output": self.output}

    def _layer(self, li: int):
        w_sl, b_sl = self._slices[li]
        fan_in, fan_out = self.layer_sizes[li], self.layer_sizes[li + 1]
        return self.params[w_sl].reshape(fan_in, fan_out), self.params[b_sl]

    def forward(self, x: np.ndarray):
        """Returns (output, cache); input is (batch, in_dim)."""
        if not np.isfinite(self.params).all():
            raise FloatingPointError("non-finite network parameters")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[1]} != {self.in_dim}")
        act, _ = _ACTIVATIONS[self.activation]
        activations = [x]
        act_caches = []
        h = x
        n_layers = len(self._slices)
        for li in range(n_layers):
            w, b = self._layer(li)
            z = h @ w + b
            if li < n_layers - 1:
                h, cache = act(z)
                act_caches.append(cache)
                activations.append(h)
            else:
                if self.output == "sigmoid":
                    h = _sigmoid(z)
                    act_caches.append(h)
                else:
                    h = z
                    act_caches.append(None)
        return h, (activations, act_caches)

    def backward(self, cache, grad_out: np.ndarray):
        """Exact reverse pass.  Returns (flat parameter gradient, input gradient)."""
        activations, act_caches = cache
        grad_out = np.atleast_2d(np.asarray(grad_out, dtype=float))
        if grad_out.shape != (activations[0].shape[0], self.out_dim):
            raise ValueError(f"upstream gradient has shape {grad_out.shape}, "
                             f"expected ({activations[0].shape[0]}, {self.out_dim})")
        _, dact = _ACTIVATIONS[self.activation]
        grad = np.zeros(self.n_params)
        n_layers = len(self._slices)
        if self.output == "sigmoid":
            s = act_caches[-1]
            delta = grad_out * s * (1.0 - s)
        else:
            delta = grad_out
        for li in range(n_layers - 1, -1, -1):
            w_sl, b_sl = self._slices[li]
            w, _ = self._layer(li)
            grad[w_sl] = (activations[li].T @ delta).reshape(-1)
            grad[b_sl] = delta.sum(axis=0)
            delta = delta @ w.T
            if li > 0:
                delta = delta * dact(act_caches[li - 1])
        return grad, delta

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward(x)
        return out

    def copy(self) -> "Mlp":
        clone = Mlp(self.layer_sizes, self.activation, self.output)
        clone.params = self.params.copy()
        return clone


class Adam:
    """Adaptive-moment first-order optimizer over a flat parameter vector."""

    def __init__(self, n_params: int, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if not np.isfinite(grad).all():
            raise FloatingPointError("non-finite gradient")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad ** 2
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def finite_difference_grad(loss_fn, params: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of the flat params."""
    grad = np.zeros_like(params)
    for i in range(params.size):
        shifted = params.copy()
        shifted[i] += step
        up = loss_fn(shifted)
        shifted[i] -= 2.0 * step
        down = loss_fn(shifted)
        grad[i] = (up - down) / (2.0 * step)
    return grad


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst-case per-coordinate relative disagreement between two gradients."""
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _log1m_tanh_sq(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2) = 2 * (log 2 - u - softplus(-2u)), stable for large |u|
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


@dataclass
class SampleCache:
    """Everything needed to differentiate through one reparameterized draw."""

    net_cache: object
    mean: np.ndarray
    log_std: np.ndarray
    std: np.ndarray
    noise: np.ndarray
    pre_squash: np.ndarray
    tanh_u: np.ndarray
    clip_mask: np.ndarray


class SquashedGaussianPolicy:
    """Diagonal Gaussian with tanh squashing onto the action box.

    The network emits (mean, raw log std) per action dimension; log std is
    clamped to [-5, 2].  Samples are always inside the box and carry the
    change-of-variables density correction.
    """

    def __init__(self, net: Mlp, action_low, action_high):
        action_low = np.asarray(action_low, dtype=float)
        action_high = np.asarray(action_high, dtype=float)
        if net.out_dim != 2 * action_low.size:
            raise ValueError("policy net must emit 2 values per action dimension")
        self.net = net
        self.action_dim = action_low.size
        self.center = (action_low + action_high) / 2.0
        self.half = (action_high - action_low) / 2.0

    def _dist_params(self, states: np.ndarray):
        out, cache = self.net.forward(states)
        mean = out[:, :self.action_dim]
        raw = out[:, self.action_dim:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        clip_mask = ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)).astype(float)
        return mean, log_std, clip_mask, cache

    def sample(self, states: np.ndarray, rng: np.random.Generator | None = None,
               deterministic: bool = False):
        """Draw actions; returns (actions, log_probs, cache).

        Deterministic mode squashes the mean and reports the density at that
        point.  Stochastic mode requires a generator.
        """
        states = np.atleast_2d(np.asarray(states, dtype=float))
        mean, log_std, clip_mask, net_cache = self._dist_params(states)
        std = np.exp(log_std)
        if deterministic:
            noise = np.zeros_like(mean)
        else:
            if rng is None:
                raise ValueError("stochastic sampling needs a random generator")
            noise = rng.standard_normal(mean.shape)
        u = mean + std * noise
        t = np.tanh(u)
        actions = self.center + self.half * t
        log_prob = (
            -0.5 * noise ** 2 - log_std - 0.5 * _LOG_2PI
            - np.log(self.half) - _log1m_tanh_sq(u)
        ).sum(axis=1)
        cache = SampleCache(net_cache=net_cache, mean=mean, log_std=log_std, std=std,
                            noise=noise, pre_squash=u, tanh_u=t, clip_mask=clip_mask)
        return actions, log_prob, cache

    def mean_action(self, states: np.ndarray) -> np.ndarray:
        actions, _, _ = self.sample(states, deterministic=True)
        return actions

    def backward_sample(self, cache: SampleCache, grad_action: np.ndarray | None = None,
                        grad_log_prob: np.ndarray | None = None) -> np.ndarray:
        """Parameter gradient of a loss that touches the sampled action and/or
        its log density (reparameterized; the noise is held fixed).

        ``grad_action`` is dL/da per sample, ``grad_log_prob`` is dL/dlogp per
        sample (shape (batch,)).
        """
        d_mean = np.zeros_like(cache.mean)
        d_log_std = np.zeros_like(cache.mean)
        one_m_t2 = 1.0 - cache.tanh_u ** 2
        if grad_action is not None:
            da_du = self.half * one_m_t2
            g = np.atleast_2d(grad_action) * da_du
            d_mean += g
            d_log_std += g * cache.std * cache.noise
        if grad_log_prob is not None:
            g = np.asarray(grad_log_prob, dtype=float).reshape(-1, 1)
            # with fixed noise: dlogp/du = 2 tanh(u); du/dmean = 1,
            # du/dlogstd = std * noise; plus the -log_std term
            dlogp_du = 2.0 * cache.tanh_u
            d_mean += g * dlogp_du
            d_log_std += g * (dlogp_du * cache.std * cache.noise - 1.0)
        d_log_std *= cache.clip_mask
        grad_out = np.concatenate([d_mean, d_log_std], axis=1)
        param_grad, _ = self.net.backward(cache.net_cache, grad_out)
        return param_grad

    def log_prob(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Log density of arbitrary in-box actions under the current policy."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        actions = np.atleast_2d(np.asarray(actions, dtype=float))
        mean, log_std, _, _ = self._dist_params(states)
        std = np.exp(log_std)
        z = np.clip((actions - self.center) / self.half, -1.0 + 1e-12, 1.0 - 1e-12)
        u = np.arctanh(z)
        return (
            -0.5 * ((u - mean) / std) ** 2 - log_std - 0.5 * _LOG_2PI
            - np.log(self.half) - _log1m_tanh_sq(u)
        ).sum(axis=1)

    def backward_log_prob(self, states: np.ndarray, actions: np.ndarray,
                          weights: np.ndarray) -> np.ndarray:
        """Parameter gradient of sum_i w_i * log pi(a_i | s_i) for fixed actions."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        actions = np.atleast_2d(np.asarray(actions, dtype=float))
        mean, log_std, clip_mask, net_cache = self._dist_params(states)
        std = np.exp(log_std)
        z = np.clip((actions - self.center) / self.half, -1.0 + 1e-12, 1.0 - 1e-12)
        u = np.arctanh(z)
        w = np.asarray(weights, dtype=float).reshape(-1, 1)
        d_mean = w * (u - mean) / std ** 2
        d_log_std = w * (((u - mean) / std) ** 2 - 1.0)
        d_log_std *= clip_mask
        grad_out = np.concatenate([d_mean, d_log_std], axis=1)
        param_grad, _ = self.net.backward(net_cache, grad_out)
        return param_grad


def make_policy_net(state_dim: int, action_dim: int, hidden, activation: str,
                    rng: np.random.Generator) -> Mlp:
    """Policy trunk emitting (mean, log std); small final layer for tame starts."""
    sizes = [state_dim, *hidden, 2 * action_dim]
    return Mlp(sizes, activation=activation, output="identity", rng=rng, final_scale=0.05)


# --- checkpoints ---

def save_mlps(path, nets: dict[str, Mlp], meta: dict | None = None) -> Path:
    """Versioned flat binary: per-net flat parameters plus an architecture
    descriptor; loading validates both."""
    path = Path(path)
    descriptors = {name: net.descriptor() for name, net in nets.items()}
    arrays = {f"params_{name}": net.params for name, net in nets.items()}
    np.savez(
        path,
        version=np.array(CHECKPOINT_VERSION),
        descriptors=np.array(json.dumps(descriptors)),
        meta=np.array(json.dumps(meta or {})),
        **arrays,
    )
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def load_mlps(path, expected: dict[str, dict] | None = None) -> tuple[dict[str, Mlp], dict]:
    """Rebuild networks from a checkpoint; fails loudly on any mismatch."""
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {version} != {CHECKPOINT_VERSION}")
        descriptors = json.loads(str(data["descriptors"]))
        meta = json.loads(str(data["meta"]))
        nets = {}
        for name, desc in descriptors.items():
            key = f"params_{name}"
            if key not in data:
                raise CheckpointError(f"checkpoint missing parameters for {name!r}")
            net = Mlp(desc["layer_sizes"], desc["activation"], desc["output"])
            params = data[key]
            if params.shape != (net.n_params,):
                raise CheckpointError(f"parameter count mismatch for {name!r}")
            net.params = params.astype(float)
            nets[name] = net
    if expected is not None:
        for name, desc in expected.items():
            if name not in nets:
                raise CheckpointError(f"checkpoint lacks required net {name!r}")
            if nets[name].descriptor() != desc:
                raise CheckpointError(
                    f"architecture mismatch for {name!r}: "
                    f"{nets[name].descriptor()} != {desc}")
    return nets, meta
