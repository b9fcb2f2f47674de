"""Small functional neural-network layers with hand-written backward passes.

A layer owns no state.  ``init`` returns its named parameters,
``forward(p, x, ctx)`` returns ``(y, cache)`` and ``backward(p, cache, dy)``
returns ``(dx, grads)``.  Keeping parameters in a flat ``{name: array}``
dict lets a caller run the same sub-network several times in one step and
decide per call which parameter gradients to keep.

Conv and pooling layers use time-major ``[batch, time, channels]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class Context:
    """Per-call execution mode.

    ``stats`` collects batch-norm running-statistic updates; pass ``None`` to
    run in train mode without touching them.
    """

    train: bool = False
    rng: np.random.Generator | None = None
    stats: dict | None = field(default=None)


def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    name = ""
    buffers: tuple[str, ...] = ()

    def init(self, rng, dtype) -> dict:
        return {}

    def forward(self, p, x, ctx):
        raise NotImplementedError

    def backward(self, p, cache, dy):
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, name, n_in, n_out):
        self.name, self.n_in, self.n_out = name, n_in, n_out

    def init(self, rng, dtype):
        return {f"{self.name}.W": _uniform(rng, (self.n_in, self.n_out), self.n_in, dtype),
                f"{self.name}.b": np.zeros(self.n_out, dtype)}

    def forward(self, p, x, ctx):
        return x @ p[f"{self.name}.W"] + p[f"{self.name}.b"], x

    def backward(self, p, x, dy):
        grads = {f"{self.name}.W": x.T @ dy, f"{self.name}.b": dy.sum(axis=0)}
        return dy @ p[f"{self.name}.W"].T, grads


class Conv1d(Layer):
    """Stride-1 'same' convolution with ``W[k, in, out]`` and odd ``k``."""

    def __init__(self, name, c_in, c_out, kernel_size=5, input_grad=True):
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        self.name, self.c_in, self.c_out, self.k = name, c_in, c_out, kernel_size
        # False on a network's first layer: nothing upstream needs dx
        self.input_grad = input_grad

    def init(self, rng, dtype):
        fan_in = self.c_in * self.k
        return {f"{self.name}.W": _uniform(rng, (self.k, self.c_in, self.c_out), fan_in, dtype),
                f"{self.name}.b": np.zeros(self.c_out, dtype)}

    def forward(self, p, x, ctx):
        b, n, c = x.shape
        pad = self.k // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        cols = np.concatenate([xp[:, j:j + n] for j in range(self.k)], axis=2)
        cols = cols.reshape(b * n, self.k * c)
        w = p[f"{self.name}.W"].reshape(self.k * c, self.c_out)
        y = cols @ w + p[f"{self.name}.b"]
        return y.reshape(b, n, self.c_out), (cols, x.shape)

    def backward(self, p, cache, dy):
        cols, (b, n, c) = cache
        pad = self.k // 2
        dyr = dy.reshape(b * n, self.c_out)
        grads = {f"{self.name}.W": (cols.T @ dyr).reshape(self.k, c, self.c_out),
                 f"{self.name}.b": dyr.sum(axis=0)}
        if not self.input_grad:
            return None, grads
        # dx is dy convolved with the time-reversed kernel (in/out swapped)
        dyp = np.pad(dy, ((0, 0), (pad, pad), (0, 0)))
        dcols = np.concatenate([dyp[:, j:j + n] for j in range(self.k)], axis=2)
        wt = p[f"{self.name}.W"][::-1].transpose(0, 2, 1).reshape(self.k * self.c_out, c)
        return (dcols.reshape(b * n, -1) @ wt).reshape(b, n, c), grads


class ReLU(Layer):
    def forward(self, p, x, ctx):
        mask = x > 0
        return x * mask, mask

    def backward(self, p, mask, dy):
        return dy * mask, {}


class MaxPool1d(Layer):
    """Non-overlapping max pooling by 2 along time; ties go to the first element."""

    def forward(self, p, x, ctx):
        b, n, c = x.shape
        pairs = x.reshape(b, n // 2, 2, c)
        first = pairs[:, :, 0] >= pairs[:, :, 1]
        return np.where(first, pairs[:, :, 0], pairs[:, :, 1]), (first, x.shape)

    def backward(self, p, cache, dy):
        first, shape = cache
        dx = np.stack([dy * first, dy * ~first], axis=2)
        return dx.reshape(shape), {}


class Upsample1d(Layer):
    """Nearest-neighbour upsampling by 2 along time."""

    def forward(self, p, x, ctx):
        return np.repeat(x, 2, axis=1), None

    def backward(self, p, cache, dy):
        b, n, c = dy.shape
        return dy.reshape(b, n // 2, 2, c).sum(axis=2), {}


class Reshape(Layer):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, p, x, ctx):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, p, shape, dy):
        return dy.reshape(shape), {}


class BatchNorm1d(Layer):
    buffers = ("running_mean", "running_var")

    def __init__(self, name, n):
        self.name, self.n = name, n

    def init(self, rng, dtype):
        return {f"{self.name}.gamma": np.ones(self.n, dtype),
                f"{self.name}.beta": np.zeros(self.n, dtype),
                f"{self.name}.running_mean": np.zeros(self.n, dtype),
                f"{self.name}.running_var": np.ones(self.n, dtype)}

    def forward(self, p, x, ctx):
        g, bt = p[f"{self.name}.gamma"], p[f"{self.name}.beta"]
        if not ctx.train:
            xhat = ((x - p[f"{self.name}.running_mean"])
                    / np.sqrt(p[f"{self.name}.running_var"] + BN_EPS))
            return g * xhat + bt, None
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu) * inv
        if ctx.stats is not None:
            m = x.shape[0]
            unbiased = var * m / max(m - 1, 1)
            ctx.stats[f"{self.name}.running_mean"] = (
                (1 - BN_MOMENTUM) * p[f"{self.name}.running_mean"] + BN_MOMENTUM * mu)
            ctx.stats[f"{self.name}.running_var"] = (
                (1 - BN_MOMENTUM) * p[f"{self.name}.running_var"] + BN_MOMENTUM * unbiased)
        return g * xhat + bt, (xhat, inv)

    def backward(self, p, cache, dy):
        xhat, inv = cache
        g = p[f"{self.name}.gamma"]
        grads = {f"{self.name}.gamma": (dy * xhat).sum(axis=0),
                 f"{self.name}.beta": dy.sum(axis=0)}
        dxhat = dy * g
        dx = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
        return dx, grads


class Dropout(Layer):
    def __init__(self, rate):
        self.rate = rate

    def forward(self, p, x, ctx):
        if not ctx.train or self.rate == 0:
            return x, None
        keep = ((ctx.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)).astype(x.dtype)
        return x * keep, keep

    def backward(self, p, keep, dy):
        return (dy if keep is None else dy * keep), {}


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def init(self, rng, dtype):
        out = {}
        for layer in self.layers:
            out.update(layer.init(rng, dtype))
        return out

    @property
    def buffer_names(self) -> list[str]:
        return [f"{l.name}.{b}" for l in self.layers for b in l.buffers]

    def forward(self, p, x, ctx):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(p, x, ctx)
            caches.append(c)
        return x, caches

    def backward(self, p, caches, dy):
        grads = {}
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy, g = layer.backward(p, c, dy)
            grads.update(g)
        return dy, grads


class Adam:
    """Adam over a named parameter dict; only names in ``grads`` are updated."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] = (params[name] - step).astype(params[name].dtype, copy=False)
