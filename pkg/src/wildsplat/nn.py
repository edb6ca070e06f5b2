"""Small fully-connected networks with hand-written backprop, plus Adam.

Every network here is tiny (two hidden layers of 64 units by default), so a
plain numpy implementation is fast enough and keeps gradients exact.
Inputs may be a single vector ``(in,)`` or a batch ``(n, in)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

ACTIVATIONS = ("identity", "sigmoid", "softplus")


class ShapeError(ValueError):
    """Raised when an array does not have the shape a layer expects."""


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    return y + np.log(-np.expm1(-y))


@dataclass
class MlpCache:
    inputs: list  # input to each linear layer, post-dropout
    pre: list  # pre-activation of each layer
    masks: list  # dropout multipliers per hidden layer (None when inactive)
    output: np.ndarray
    squeeze: bool


@dataclass
class Mlp:
    weights: list
    biases: list
    output: str = "identity"
    dropout: float = 0.0

    def __post_init__(self):
        if self.output not in ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(
                    f"layer {k}: expects {w.shape[1]} inputs, previous layer emits "
                    f"{self.weights[k - 1].shape[0]}"
                )

    @classmethod
    def create(
        cls,
        widths: Sequence[int],
        rng: np.random.Generator,
        output: str = "identity",
        dropout: float = 0.0,
        final_scale: float = 1.0,
        final_bias=None,
    ) -> "Mlp":
        """He-initialised network; ``final_scale`` shrinks the last layer (0 zeroes it)."""
        if len(widths) < 2 or any(int(w) <= 0 for w in widths):
            raise ValueError(f"invalid layer widths {list(widths)}")
        weights, biases = [], []
        n_layers = len(widths) - 1
        for k in range(n_layers):
            fan_in, fan_out = int(widths[k]), int(widths[k + 1])
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            b = np.zeros(fan_out)
            if k == n_layers - 1:
                w *= final_scale
                if final_bias is not None:
                    b[:] = final_bias
            weights.append(w)
            biases.append(b)
        return cls(weights, biases, output=output, dropout=dropout)

    @property
    def widths(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        self.weights = list(params[0::2])
        self.biases = list(params[1::2])

    def copy(self) -> "Mlp":
        return Mlp(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            output=self.output,
            dropout=self.dropout,
        )

    def forward(self, x, mode: str = "eval", rng: Optional[np.random.Generator] = None):
        """Return ``(output, cache)``.

        In ``train`` mode with a nonzero dropout rate, hidden activations are
        dropped and rescaled by ``1/(1-p)``; ``rng`` must then be supplied.
        """
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.weights[0].shape[1]:
            raise ShapeError(
                f"layer 0: expects {self.weights[0].shape[1]} inputs, got shape {x.shape[1:]}"
            )
        drop = mode == "train" and self.dropout > 0.0
        if drop and rng is None:
            raise ValueError("train-mode dropout requires an rng")
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")

        inputs, pre, masks = [], [], []
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w.T + b
            pre.append(z)
            if k < last:
                h = np.maximum(z, 0.0)
                if drop:
                    keep = rng.random(h.shape) >= self.dropout
                    m = keep / (1.0 - self.dropout)
                    h = h * m
                    masks.append(m)
                else:
                    masks.append(None)
            else:
                h = _activate(z, self.output)
        cache = MlpCache(inputs, pre, masks, h, squeeze)
        return (h[0] if squeeze else h), cache

    def __call__(self, x):
        return self.forward(x, "eval")[0]

    def backward(self, cache: MlpCache, grad_output):
        """Return ``(grad_input, grads)`` with ``grads`` ordered like :meth:`params`."""
        g = np.asarray(grad_output, dtype=np.float64)
        if cache.squeeze:
            g = g[None, :]
        if g.shape != cache.output.shape:
            raise ShapeError(f"grad_output shape {g.shape} != output shape {cache.output.shape}")
        last = len(self.weights) - 1
        g = g * _activate_grad(cache.pre[last], cache.output, self.output)
        grads = [None] * (2 * len(self.weights))
        for k in range(last, -1, -1):
            grads[2 * k] = g.T @ cache.inputs[k]
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.weights[k]
            if k > 0:
                if cache.masks[k - 1] is not None:
                    g = g * cache.masks[k - 1]
                g = g * (cache.pre[k - 1] > 0.0)
        return (g[0] if cache.squeeze else g), grads


def _activate(z, kind):
    if kind == "identity":
        return z
    if kind == "sigmoid":
        return sigmoid(z)
    return softplus(z)


def _activate_grad(z, y, kind):
    if kind == "identity":
        return 1.0
    if kind == "sigmoid":
        return y * (1.0 - y)
    return sigmoid(z)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr, **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("params, grads and optimizer moments differ in count")
    t = state.t + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"param {p.shape}, grad {g.shape}, moment {m.shape} mismatch")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        p = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)
