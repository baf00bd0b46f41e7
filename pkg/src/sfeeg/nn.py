"""Small dense-network kernel with explicit forward/backward passes.

Parameters are stored in the layer dtype (float32 by default). Batch
statistics and softmax are evaluated in float64 and cast back.
"""
from __future__ import annotations

import numpy as np

from .errors import NumericError, ParameterError, ShapeError, StateError


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)


class Linear:
    """Fully connected layer, ``y = x @ W.T + b`` with ``W`` shaped [out, in]."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = glorot_uniform(rng, in_dim, out_dim, dtype)
        self.bias = np.zeros(out_dim, dtype=dtype)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"linear expects [B, {self.in_dim}], got {x.shape}")
        self._x = x if training else None
        return x @ self.weight.T + self.bias

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError("backward called without a training-mode forward")
        self.grad_weight += (dy.T @ self._x).astype(self.weight.dtype)
        self.grad_bias += dy.sum(axis=0).astype(self.bias.dtype)
        return dy @ self.weight

    def parameters(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def gradients(self) -> dict[str, np.ndarray]:
        return {"weight": self.grad_weight, "bias": self.grad_bias}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def zero_grad(self):
        self.grad_weight[...] = 0
        self.grad_bias[...] = 0


class BatchNorm1d:
    """Batch normalization over the batch axis of a [B, dim] input.

    Running statistics follow ``r = (1 - momentum) * r + momentum * batch``;
    the running variance uses the unbiased batch variance.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        if not 0.0 < momentum < 1.0:
            raise ParameterError("momentum must lie in (0, 1)")
        if eps <= 0:
            raise ParameterError("eps must be positive")
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(dim, dtype=dtype)
        self.beta = np.zeros(dim, dtype=dtype)
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.grad_gamma = np.zeros_like(self.gamma)
        self.grad_beta = np.zeros_like(self.beta)
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"batchnorm expects [B, {self.dim}], got {x.shape}")
        dtype = self.gamma.dtype
        if not training:
            self._cache = None
            inv_std = 1.0 / np.sqrt(self.running_var.astype(np.float64) + self.eps)
            xhat = ((x - self.running_mean) * inv_std).astype(dtype)
            return self.gamma * xhat + self.beta

        n = x.shape[0]
        if n < 2:
            raise ParameterError("training-mode batch norm needs at least 2 samples")
        x64 = x.astype(np.float64)
        mean = x64.mean(axis=0)
        var = x64.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x64 - mean) * inv_std
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(dtype)
        self.running_var = ((1 - m) * self.running_var + m * var * n / (n - 1)).astype(dtype)
        self._cache = (xhat.astype(dtype), inv_std.astype(dtype))
        return self.gamma * self._cache[0] + self.beta

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("backward called without a training-mode forward")
        xhat, inv_std = self._cache
        n = dy.shape[0]
        self.grad_gamma += (dy * xhat).sum(axis=0)
        self.grad_beta += dy.sum(axis=0)
        dxhat = dy * self.gamma
        return (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))

    def parameters(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def gradients(self) -> dict[str, np.ndarray]:
        return {"gamma": self.grad_gamma, "beta": self.grad_beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def zero_grad(self):
        self.grad_gamma[...] = 0
        self.grad_beta[...] = 0


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        mask = x > 0
        self._mask = mask if training else None
        return x * mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise StateError("backward called without a training-mode forward")
        return dy * self._mask

    def parameters(self):
        return {}

    def gradients(self):
        return {}

    def buffers(self):
        return {}

    def zero_grad(self):
        pass


class Sequential:
    """Ordered stack of layers with dotted parameter names (``0.weight``)."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def _named(self, attr):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in getattr(layer, attr)().items():
                out[f"{i}.{name}"] = arr
        return out

    def parameters(self):
        return self._named("parameters")

    def gradients(self):
        return self._named("gradients")

    def buffers(self):
        return self._named("buffers")

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax in float64 with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax received non-finite logits")
    if z.shape[-1] < 2:
        raise ShapeError("softmax needs at least two classes")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))


class Adam:
    """Adam with coupled L2 weight decay (``g + weight_decay * theta``).

    ``params`` maps names to arrays that are updated in place. When
    ``flat_params`` / ``flat_grads`` are given and every parameter and
    gradient is a view into them, one vectorized update covers all tensors.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0,
                 flat_params: np.ndarray | None = None, flat_grads: np.ndarray | None = None):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._flat = None
        if flat_params is not None and flat_grads is not None and all(p.base is flat_params for p in params.values()):
            self._flat = (flat_params, flat_grads)
            self._flat_m = np.zeros_like(flat_params)
            self._flat_v = np.zeros_like(flat_params)
            self.m, self.v = {}, {}
            for k, p in params.items():
                off = _offset(p, flat_params)
                self.m[k] = self._flat_m[off:off + p.size].reshape(p.shape)
                self.v[k] = self._flat_v[off:off + p.size].reshape(p.shape)
        else:
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]):
        if grads.keys() != self.params.keys():
            raise ShapeError("gradient names do not match optimizer parameters")
        for k, g in grads.items():
            if g.shape != self.params[k].shape:
                raise ShapeError(f"gradient shape mismatch for {k}: {g.shape} vs {self.params[k].shape}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        if self._flat is not None and all(g.base is self._flat[1] for g in grads.values()):
            self._update(self._flat[0], self._flat[1], self._flat_m, self._flat_v, c1, c2)
            return
        for k, p in self.params.items():
            self._update(p, grads[k], self.m[k], self.v[k], c1, c2)

    def _update(self, p, g, m, v, c1, c2):
        # moments live in the parameter dtype; update them in place
        if self.weight_decay:
            g = g + self.weight_decay * p
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += self.eps
        p -= (self.lr / c1) * m / denom

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"step": np.array([self.step_count], dtype=np.float32)}
        for k in self.params:
            state[f"m.{k}"] = self.m[k]
            state[f"v.{k}"] = self.v[k]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        self.step_count = int(state["step"][0])
        for k in self.params:
            self.m[k][...] = state[f"m.{k}"]
            self.v[k][...] = state[f"v.{k}"]


def _offset(view: np.ndarray, base: np.ndarray) -> int:
    return (view.__array_interface__["data"][0] - base.__array_interface__["data"][0]) // base.itemsize


def flatten_into(arrays: list[np.ndarray], dtype) -> tuple[np.ndarray, list[np.ndarray]]:
    """Copy ``arrays`` into one contiguous buffer; returns the buffer and views shaped like the inputs."""
    flat = np.empty(sum(a.size for a in arrays), dtype=dtype)
    views, off = [], 0
    for a in arrays:
        v = flat[off:off + a.size].reshape(a.shape)
        v[...] = a
        views.append(v)
        off += a.size
    return flat, views
