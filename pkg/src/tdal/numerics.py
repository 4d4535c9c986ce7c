"""Numerical substrate: seeded streams, a small MLP with explicit backprop, Adam.

Everything here works in float64 on plain numpy arrays. A "matrix" is a 2-D
``np.ndarray``; shapes are checked at the public boundaries and violations
raise :class:`ContractError`.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

HIDDEN_ACTIVATIONS = ("tanh", "relu")
OUTPUT_ACTIVATIONS = ("linear", "softmax", "sigmoid")


class ContractError(ValueError):
    """Raised when an input violates a shape or value precondition."""


def as_matrix(x, name: str = "x", cols: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"{name}: expected a 2-D matrix, got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise ContractError(f"{name}: expected {cols} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name}: contains non-finite entries")
    return arr


# ---------------------------------------------------------------------------
# Random streams


class Rng:
    """Counter-based random stream addressed by ``(seed, label path)``.

    Children are derived by hashing the label path, so a child's stream does
    not depend on which siblings were created before it.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(str(p) for p in path)
        digest = hashlib.sha256(
            ("%d|" % self.seed + "/".join(self.path)).encode("utf-8")
        ).digest()
        key = np.frombuffer(digest[:16], dtype="<u8").copy()
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *labels) -> "Rng":
        return Rng(self.seed, self.path + tuple(str(lab) for lab in labels))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"


# ---------------------------------------------------------------------------
# Stable elementwise helpers


def logsumexp(a: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    return logits - logsumexp(logits, axis=-1, keepdims=True)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    y = np.asarray(y, dtype=np.int64)
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), y]))
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# Multi-layer perceptron


@dataclass
class Mlp:
    sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden: str = "tanh"
    output: str = "linear"

    def __post_init__(self):
        if self.hidden not in HIDDEN_ACTIVATIONS:
            raise ContractError(f"unknown hidden activation {self.hidden!r}")
        if self.output not in OUTPUT_ACTIVATIONS:
            raise ContractError(f"unknown output activation {self.output!r}")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise ContractError("layer count does not match sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[i], self.sizes[i + 1]) or b.shape != (self.sizes[i + 1],):
                raise ContractError(f"layer {i}: parameter shapes do not match sizes")

    @classmethod
    def init(cls, sizes: Sequence[int], rng: Rng, hidden: str = "tanh",
             output: str = "linear") -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ContractError(f"invalid layer sizes {sizes}")
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.child("layer", i).gen.uniform(-limit, limit, (fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(sizes, weights, biases, hidden, output)

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays (by reference) in the order W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Mlp":
        return copy.deepcopy(self)

    def _act(self, a):
        return np.tanh(a) if self.hidden == "tanh" else np.maximum(a, 0.0)

    def _act_grad(self, a, h):
        return 1.0 - h * h if self.hidden == "tanh" else (a > 0).astype(np.float64)

    def _out(self, a):
        if self.output == "softmax":
            return softmax(a)
        if self.output == "sigmoid":
            return sigmoid(a)
        return a

    def forward_cache(self, x) -> tuple[np.ndarray, dict]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ContractError(
                f"mlp input: expected (B, {self.n_in}), got {x.shape}")
        inputs, pre = [], []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            a = h @ w + b
            pre.append(a)
            h = self._act(a) if i < last else a
        out = self._out(h)
        return out, {"inputs": inputs, "pre": pre, "logits": h, "out": out}

    def forward(self, x) -> np.ndarray:
        return self.forward_cache(x)[0]

    def logits(self, x) -> np.ndarray:
        return self.forward_cache(x)[1]["logits"]

    def backward(self, cache: dict, grad, wrt: str = "output"):
        """Backpropagate ``grad``.

        ``wrt="output"`` treats ``grad`` as dL/d(output after activation);
        ``wrt="logits"`` skips the output activation (fused losses).
        Returns ``(param_grads, grad_x)`` with ``param_grads`` ordered like
        :meth:`params`.
        """
        g = np.asarray(grad, dtype=np.float64)
        out = cache["out"]
        if g.shape != out.shape:
            raise ContractError(f"upstream gradient shape {g.shape} != output {out.shape}")
        if wrt == "output":
            if self.output == "softmax":
                g = out * (g - np.sum(g * out, axis=1, keepdims=True))
            elif self.output == "sigmoid":
                g = g * out * (1.0 - out)
        elif wrt != "logits":
            raise ContractError(f"wrt must be 'output' or 'logits', got {wrt!r}")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            h_in = cache["inputs"][i]
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * self._act_grad(cache["pre"][i - 1], h_in)
        return grads, g


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    shapes: list[tuple[int, ...]]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        shapes = [p.shape for p in params]
        return cls(shapes, lr, m=[np.zeros(s) for s in shapes],
                   v=[np.zeros(s) for s in shapes], **kw)


def adam_step(state: AdamState, params: Sequence[np.ndarray],
              grads: Sequence[np.ndarray]) -> Sequence[np.ndarray]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(state.shapes) or len(grads) != len(params):
        raise ContractError("parameter/gradient count does not match optimizer state")
    for p, g, s in zip(params, grads, state.shapes):
        if p.shape != s or np.shape(g) != s:
            raise ContractError(f"shape mismatch in adam_step: {p.shape}, {np.shape(g)}, {s}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# Finite-difference checking


def grad_check(loss_fn: Callable[[Sequence[np.ndarray]], tuple[float, Sequence[np.ndarray]]],
               params: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)``. Parameters are
    perturbed in place and restored. The error for each entry is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    loss, analytic = loss_fn(params)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at the check point: {loss}")
    analytic = [np.array(a, dtype=np.float64, copy=True) for a in analytic]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(params)[0]
            flat[i] = orig - h
            down = loss_fn(params)[0]
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("non-finite loss during finite differencing")
            num = (up - down) / (2.0 * h)
            err = abs(a_flat[i] - num) / max(1.0, abs(a_flat[i]), abs(num))
            worst = max(worst, err)
    return worst
