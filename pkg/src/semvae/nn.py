"""Dense layers with hand-written gradients, a parameter store and Adam.

Everything runs in float64. Layers accept a single vector ``(n_in,)`` or a
batch ``(n, n_in)``; gradients are summed over the batch.
"""

from __future__ import annotations

import math
from typing import Iterable, TextIO

import numpy as np

ACTIVATIONS = ("identity", "tanh", "relu")


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


def glorot_uniform(n_in: int, n_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


class DenseLayer:
    """y = act(W x + b) with W shaped (out, in)."""

    def __init__(self, n_in: int, n_out: int, activation: str = "identity",
                 rng: np.random.Generator | None = None, name: str = "dense"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if n_in < 1 or n_out < 1:
            raise ShapeError(f"{name}: dimensions must be positive, got ({n_out}, {n_in})")
        self.name = name
        self.activation = activation
        if rng is None:
            self.W = np.zeros((n_out, n_in))
        else:
            self.W = glorot_uniform(n_in, n_out, rng)
        self.b = np.zeros(n_out)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self._x: np.ndarray | None = None
        self._pre: np.ndarray | None = None
        self._out: np.ndarray | None = None

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in or x.ndim not in (1, 2):
            raise ShapeError(f"{self.name}: expected input width {self.n_in}, got shape {x.shape}")
        pre = x @ self.W.T + self.b
        if self.activation == "tanh":
            out = np.tanh(pre)
        elif self.activation == "relu":
            out = np.maximum(pre, 0.0)
        else:
            out = pre
        self._x, self._pre, self._out = x, pre, out
        return out

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError(f"{self.name}: backward called before forward")
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != self._pre.shape:
            raise ShapeError(f"{self.name}: upstream shape {g.shape} != output shape {self._pre.shape}")
        if self.activation == "tanh":
            g = g * (1.0 - self._out ** 2)
        elif self.activation == "relu":
            g = g * (self._pre > 0)
        if g.ndim == 1:
            self.dW += np.outer(g, self._x)
            self.db += g
        else:
            self.dW += g.T @ self._x
            self.db += g.sum(axis=0)
        return g @ self.W

    def params(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        return [(f"{self.name}.W", self.W, self.dW), (f"{self.name}.b", self.b, self.db)]


class ParamStore:
    """Ordered named parameters paired with their gradient accumulators.

    Arrays are shared with the owning layers, so updates made here are seen by
    the layers and vice versa.
    """

    def __init__(self, layers: Iterable[DenseLayer] = ()):
        self.names: list[str] = []
        self.values: list[np.ndarray] = []
        self.grads: list[np.ndarray] = []
        for layer in layers:
            for name, value, grad in layer.params():
                self.add(name, value, grad)

    def add(self, name: str, value: np.ndarray, grad: np.ndarray) -> None:
        if name in self.names:
            raise ValueError(f"duplicate parameter name {name!r}")
        if value.shape != grad.shape:
            raise ShapeError(f"{name}: gradient shape {grad.shape} != parameter shape {value.shape}")
        self.names.append(name)
        self.values.append(value)
        self.grads.append(grad)

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[self.names.index(name)]

    def grad(self, name: str) -> np.ndarray:
        return self.grads[self.names.index(name)]

    def zero_grad(self) -> None:
        for g in self.grads:
            g.fill(0.0)

    def write(self, fh: TextIO) -> None:
        for name, value in zip(self.names, self.values):
            shape = " ".join(str(s) for s in value.shape)
            fh.write(f"param {name} {shape}\n")
            rows = value.reshape(value.shape[0], -1) if value.ndim > 1 else value.reshape(1, -1)
            for row in rows:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")

    def read(self, lines: Iterable[str]) -> None:
        """Load values written by :meth:`write` into the existing arrays, in place."""
        it = iter(lines)
        seen = set()
        for line in it:
            line = line.strip()
            if not line:
                continue
            head = line.split()
            if head[0] != "param":
                raise ValueError(f"expected 'param' record, got {line[:40]!r}")
            name, shape = head[1], tuple(int(s) for s in head[2:])
            target = self[name]
            if target.shape != shape:
                raise ShapeError(f"{name}: snapshot shape {shape} != model shape {target.shape}")
            n_rows = shape[0] if len(shape) > 1 else 1
            rows = [np.array([float(v) for v in next(it).split()]) for _ in range(n_rows)]
            target[...] = np.concatenate(rows).reshape(shape)
            seen.add(name)
        missing = set(self.names) - seen
        if missing:
            raise ValueError(f"snapshot missing parameters: {sorted(missing)}")


class Adam:
    """Adam with a learning rate decayed by ``decay`` once per epoch."""

    def __init__(self, params: ParamStore, lr: float = 1e-3, decay: float = 0.95,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0 or decay <= 0:
            raise ValueError("learning rate and decay must be positive")
        self.params = params
        self.lr = lr
        self.decay = decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.epoch = 0
        self.m = [np.zeros_like(v) for v in params.values]
        self.v = [np.zeros_like(v) for v in params.values]

    @property
    def rate(self) -> float:
        return self.lr * self.decay ** self.epoch

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        rate = self.rate
        for value, grad, m, v in zip(self.params.values, self.params.grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            value -= rate * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self.params.zero_grad()

    def end_epoch(self) -> None:
        self.epoch += 1
