"""Minimal dense layers with explicit reverse-mode differentiation.

No autograd framework: each layer caches what its backward pass needs and
accumulates parameter gradients in place.  Shapes are (batch, features).
"""

from __future__ import annotations

import numpy as np


class Parameter:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=float)
        self.grad = np.zeros_like(self.value)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "linear"):
        scale = 1.0 / np.sqrt(n_in)
        self.w = Parameter(f"{name}.w", rng.uniform(-scale, scale, size=(n_in, n_out)))
        self.b = Parameter(f"{name}.b", np.zeros(n_out))
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.w.value + self.b.value

    def backward(self, gout: np.ndarray) -> np.ndarray:
        self.w.grad += self._x.T @ gout
        self.b.grad += gout.sum(axis=0)
        return gout @ self.w.value.T

    def parameters(self):
        return [self.w, self.b]


class Tanh:
    def __init__(self):
        self._y = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._y = np.tanh(x)
        return self._y

    def backward(self, gout: np.ndarray) -> np.ndarray:
        return gout * (1.0 - self._y**2)

    def parameters(self):
        return []


class MLP:
    """Fully connected stack: Linear -> Tanh -> ... -> Linear."""

    def __init__(self, sizes, rng: np.random.Generator, name: str = "mlp"):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.layers.append(Linear(a, b, rng, name=f"{name}.{i}"))
            if i < len(sizes) - 2:
                self.layers.append(Tanh())

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, gout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            gout = layer.backward(gout)
        return gout

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


def zero_grads(params):
    for p in params:
        p.grad[...] = 0.0


class SGD:
    """Plain gradient descent with momentum."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self._v):
            v *= self.momentum
            v += p.grad
            p.value -= self.lr * v


class AdamW:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]
        self._t = 0

    def step(self):
        self._t += 1
        bc1 = 1.0 - self.b1**self._t
        bc2 = 1.0 - self.b2**self._t
        for p, m, v in zip(self.params, self._m, self._v):
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad**2
            if self.weight_decay:
                p.value *= 1.0 - self.lr * self.weight_decay
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def make_optimizer(kind: str, params, lr: float, **kwargs):
    kind = kind.lower()
    if kind == "sgd":
        return SGD(params, lr, **kwargs)
    if kind == "adamw":
        return AdamW(params, lr, **kwargs)
    raise ValueError(f"unknown optimizer {kind!r}")
