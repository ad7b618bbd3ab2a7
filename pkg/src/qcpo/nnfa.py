"""Flat-parameter MLPs, Adam, and stochastic policy heads.

All trainable values of a model live in one :class:`ParamStore`: a flat float
vector plus a layout of named, disjoint slices.  Networks read their weights
out of either the raw vector (fast, no gradient) or a taped :class:`Tensor`
watching that vector, so a single ``tape.gradient`` call yields the gradient
for the whole store.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, GradTape, constant

__all__ = [
    "ParamStore",
    "MLPSpec",
    "MLP",
    "Adam",
    "GaussianPolicyOutput",
    "GaussianPolicy",
    "CategoricalPolicy",
    "gaussian_logprob",
    "kl_diag_gaussian",
    "kl_categorical",
    "backward",
]

LOG_2PI = math.log(2.0 * math.pi)
SIGMOID_SCALE = 4.0


class ParamStore:
    """Flat parameter vector with named slices."""

    def __init__(self):
        self.values = np.zeros(0)
        self.layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        self._slices: dict[str, tuple[int, int, tuple[int, ...]]] = {}

    def add(self, name: str, init: np.ndarray) -> None:
        if name in self.layout:
            raise KeyError(f"duplicate parameter name {name!r}")
        init = np.asarray(init, dtype=np.float64)
        self.layout[name] = (self.values.size, init.shape)
        self._slices[name] = (self.values.size, self.values.size + init.size, init.shape)
        self.values = np.concatenate([self.values, init.ravel()])

    def bounds(self, name: str) -> tuple[int, int]:
        start, shape = self.layout[name]
        return start, start + int(np.prod(shape, dtype=int))

    def get(self, name: str, flat=None):
        """The named slice, read from ``flat`` (ndarray or Tensor) or the store."""
        start, stop, shape = self._slices[name]
        src = self.values if flat is None else flat
        part = src[start:stop]
        return part.reshape(shape) if len(shape) > 1 else part

    def names_in(self, prefix: str) -> list[str]:
        return [n for n in self.layout if n.startswith(prefix)]

    def mask(self, prefix: str) -> np.ndarray:
        m = np.zeros(self.values.size, dtype=bool)
        for n in self.names_in(prefix):
            lo, hi = self.bounds(n)
            m[lo:hi] = True
        return m

    def name_at(self, index: int) -> str:
        for name in self.layout:
            lo, hi = self.bounds(name)
            if lo <= index < hi:
                return name
        raise IndexError(index)

    def copy(self) -> "ParamStore":
        other = ParamStore()
        other.values = self.values.copy()
        other.layout = dict(self.layout)
        other._slices = dict(self._slices)
        return other

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    hidden_activation: str = "tanh"
    output_activation: str = "linear"  # linear | exp | scaled_sigmoid

    def __post_init__(self):
        if self.hidden_activation != "tanh":
            raise ValueError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation not in ("linear", "exp", "scaled_sigmoid"):
            raise ValueError(f"unsupported output activation {self.output_activation!r}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _output_act(z: Tensor, kind: str) -> Tensor:
    if kind == "exp":
        return z.exp()
    if kind == "scaled_sigmoid":
        return z.sigmoid() * SIGMOID_SCALE
    return z


class MLP:
    """Fully connected tanh network whose weights live in a ParamStore."""

    def __init__(self, spec: MLPSpec, store: ParamStore, prefix: str, rng: np.random.Generator,
                 out_scale: float = 1.0, out_bias: float = 0.0):
        self.spec = spec
        self.store = store
        self.prefix = prefix
        dims = [spec.input_dim, *spec.hidden_dims, spec.output_dim]
        self.n_layers = len(dims) - 1
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == self.n_layers - 1
            gain = out_scale if last else math.sqrt(2.0)
            bound = gain * math.sqrt(3.0 / fan_in)
            store.add(f"{prefix}/W{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            store.add(f"{prefix}/b{i}", np.full(fan_out, out_bias if last else 0.0))

    def pre_activation(self, x, flat=None) -> Tensor:
        x = _as_tensor(x)
        if x.shape[-1] != self.spec.input_dim:
            raise ValueError(f"{self.prefix}: expected input dim {self.spec.input_dim}, got {x.shape[-1]}")
        src = _as_tensor(self.store.values) if flat is None else flat
        h = x
        for i in range(self.n_layers):
            h = h @ self.store.get(f"{self.prefix}/W{i}", src) + self.store.get(f"{self.prefix}/b{i}", src)
            if i < self.n_layers - 1:
                h = h.tanh()
        return h

    def __call__(self, x, flat=None) -> Tensor:
        return _output_act(self.pre_activation(x, flat), self.spec.output_activation)

    def forward(self, x, flat=None) -> np.ndarray:
        """Untaped evaluation returning a plain array."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.spec.input_dim:
            raise ValueError(f"{self.prefix}: expected input dim {self.spec.input_dim}, got {x.shape[-1]}")
        src = self.store.values if flat is None else np.asarray(getattr(flat, "value", flat))
        h = x
        for i in range(self.n_layers):
            h = h @ self.store.get(f"{self.prefix}/W{i}", src) + self.store.get(f"{self.prefix}/b{i}", src)
            if i < self.n_layers - 1:
                h = np.tanh(h)
        kind = self.spec.output_activation
        if kind == "exp":
            return np.exp(h)
        if kind == "scaled_sigmoid":
            return SIGMOID_SCALE * 0.5 * (1.0 + np.tanh(0.5 * h))
        return h


def forward(spec: MLPSpec, store: ParamStore, prefix: str, x) -> np.ndarray:
    """Evaluate an MLP described by ``spec`` whose weights sit under ``prefix``."""
    net = MLP.__new__(MLP)
    net.spec, net.store, net.prefix = spec, store, prefix
    net.n_layers = len(spec.hidden_dims) + 1
    return net.forward(x)


def backward(tape: GradTape, loss: Tensor, wrt: Tensor) -> np.ndarray:
    """Gradient of a taped scalar loss with respect to a watched tensor."""
    return tape.gradient(loss, wrt)


class Adam:
    """Adam with bias correction over a flat parameter vector."""

    def __init__(self, size: int, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray, lr: float | None = None,
             mask: np.ndarray | None = None, store: ParamStore | None = None) -> np.ndarray:
        """Return updated params; only entries selected by ``mask`` move."""
        grads = np.asarray(grads, dtype=np.float64)
        bad = ~np.isfinite(grads)
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            where_ = store.name_at(idx) if store is not None else f"index {idx}"
            raise FloatingPointError(f"non-finite gradient in parameter slice {where_}")
        lr = self.lr if lr is None else lr
        if mask is None:
            mask = slice(None)
        self.t += 1
        g = grads[mask]
        self.m[mask] = self.beta1 * self.m[mask] + (1 - self.beta1) * g
        self.v[mask] = self.beta2 * self.v[mask] + (1 - self.beta2) * g * g
        m_hat = self.m[mask] / (1 - self.beta1**self.t)
        v_hat = self.v[mask] / (1 - self.beta2**self.t)
        out = np.array(params, dtype=np.float64, copy=True)
        out[mask] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def adam_step(opt: Adam, params: np.ndarray, grads: np.ndarray, lr: float = 1e-4) -> np.ndarray:
    return opt.step(params, grads, lr=lr)


# -- distributions --------------------------------------------------------------


@dataclass
class GaussianPolicyOutput:
    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_std = np.asarray(self.log_std, dtype=np.float64)
        if not np.all(np.isfinite(self.log_std)):
            raise ValueError("log_std must be finite")

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


def _gaussian_logprob(mean, log_std, action) -> Tensor:
    mean, log_std, action = _as_tensor(mean), _as_tensor(log_std), _as_tensor(action)
    z = (action - mean) / log_std.exp()
    d = mean.shape[-1]
    return (z * z).sum(axis=-1) * -0.5 - log_std.sum(axis=-1) - 0.5 * d * LOG_2PI


def gaussian_logprob(out: GaussianPolicyOutput, action) -> float | np.ndarray:
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != out.mean.shape[-1]:
        raise ValueError("action and mean dimensions differ")
    log_std = np.broadcast_to(out.log_std, out.mean.shape)
    val = _gaussian_logprob(out.mean, log_std, action).value
    return float(val) if val.ndim == 0 else val


def kl_diag_gaussian(p: GaussianPolicyOutput, q: GaussianPolicyOutput) -> float | np.ndarray:
    """KL(p || q) for diagonal Gaussians, summed over action dimensions."""
    if p.mean.shape[-1] != q.mean.shape[-1]:
        raise ValueError("dimension mismatch")
    var_p, var_q = np.exp(2 * p.log_std), np.exp(2 * q.log_std)
    kl = q.log_std - p.log_std + (var_p + (p.mean - q.mean) ** 2) / (2 * var_q) - 0.5
    val = np.sum(np.broadcast_to(kl, np.broadcast(p.mean, q.mean).shape), axis=-1)
    return float(val) if np.ndim(val) == 0 else val


def kl_categorical(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """KL(p || q) from log-probabilities along the last axis."""
    return np.sum(np.exp(logp) * (logp - logq), axis=-1)


class CategoricalPolicy:
    """Softmax policy over ``n_actions`` discrete actions."""

    discrete = True

    def __init__(self, obs_dim: int, n_actions: int, hidden: tuple[int, ...], store: ParamStore,
                 rng: np.random.Generator, prefix: str = "pi"):
        self.n_actions = n_actions
        self.prefix = prefix
        self.net = MLP(MLPSpec(obs_dim, tuple(hidden), n_actions), store, f"{prefix}/logits", rng,
                       out_scale=0.01)

    def log_probs(self, obs, flat=None) -> Tensor:
        return self.net.pre_activation(obs, flat).log_softmax(axis=-1)

    def log_prob(self, obs, actions, flat=None) -> Tensor:
        lp = self.log_probs(obs, flat)
        actions = np.asarray(actions, dtype=int)
        return lp[np.arange(len(actions)), actions]

    def log_probs_np(self, obs, flat=None) -> np.ndarray:
        z = self.net.forward(obs, flat)
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def sample(self, obs, rng: np.random.Generator, flat=None):
        logp = self.log_probs_np(obs, flat)
        cdf = np.cumsum(np.exp(logp))
        a = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), self.n_actions - 1)
        return a, float(logp[a])

    def greedy(self, obs, flat=None) -> int:
        return int(np.argmax(self.log_probs_np(obs, flat)))

    def mean_kl(self, obs, old_flat, new_flat) -> float:
        return float(np.mean(kl_categorical(self.log_probs_np(obs, old_flat),
                                            self.log_probs_np(obs, new_flat))))


class GaussianPolicy:
    """Diagonal Gaussian with a state-independent log standard deviation."""

    discrete = False

    def __init__(self, obs_dim: int, act_dim: int, hidden: tuple[int, ...], store: ParamStore,
                 rng: np.random.Generator, prefix: str = "pi", init_log_std: float = 0.0):
        self.act_dim = act_dim
        self.prefix = prefix
        self.store = store
        self.net = MLP(MLPSpec(obs_dim, tuple(hidden), act_dim), store, f"{prefix}/mean", rng,
                       out_scale=0.01)
        store.add(f"{prefix}/log_std", np.full(act_dim, init_log_std))

    def output(self, obs, flat=None) -> GaussianPolicyOutput:
        src = self.store.values if flat is None else flat
        return GaussianPolicyOutput(self.net.forward(obs, flat), np.asarray(self.store.get(f"{self.prefix}/log_std", src)))

    def log_prob(self, obs, actions, flat=None) -> Tensor:
        src = _as_tensor(self.store.values) if flat is None else flat
        mean = self.net(obs, src)
        log_std = self.store.get(f"{self.prefix}/log_std", src)
        return _gaussian_logprob(mean, log_std, np.asarray(actions, dtype=np.float64))

    def sample(self, obs, rng: np.random.Generator, flat=None):
        out = self.output(np.atleast_2d(obs), flat)
        a = out.mean[0] + out.std * rng.standard_normal(self.act_dim)
        return a, float(gaussian_logprob(GaussianPolicyOutput(out.mean[0], out.log_std), a))

    def greedy(self, obs, flat=None) -> np.ndarray:
        return self.output(np.atleast_2d(obs), flat).mean[0]

    def mean_kl(self, obs, old_flat, new_flat) -> float:
        return float(np.mean(kl_diag_gaussian(self.output(obs, old_flat), self.output(obs, new_flat))))
