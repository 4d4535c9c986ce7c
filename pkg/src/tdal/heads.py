"""Stochastic prediction heads.

A head exposes ``predict_members(Z) -> (B, K, C)``: K realisations of the
class distribution per input. For the random forest each tree is one
realisation; for the Laplace head each cached posterior weight sample is one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import AdamState, ContractError, Mlp, Rng, adam_step, as_matrix, log_softmax

# ---------------------------------------------------------------------------
# Random forest


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 250
    max_depth: int = 12
    min_leaf: int = 2
    features_per_split: int | None = None   # None -> ceil(sqrt(d))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("n_trees, max_depth and min_leaf must be >= 1")


@dataclass
class Tree:
    feature: np.ndarray     # -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray       # (n_nodes, C) smoothed leaf distributions

    def apply(self, Z: np.ndarray) -> np.ndarray:
        node = np.zeros(Z.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while np.any(active):
            idx = np.flatnonzero(active)
            n = node[idx]
            go_left = Z[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active[idx] = self.feature[node[idx]] >= 0
        return node

    def predict(self, Z: np.ndarray) -> np.ndarray:
        return self.value[self.apply(Z)]

    @property
    def n_nodes(self) -> int:
        return self.feature.size


def _best_split(X: np.ndarray, Y: np.ndarray, feats: np.ndarray, min_leaf: int):
    """Best Gini split over ``feats``; returns (feature, threshold) or None.

    ``Y`` is the one-hot label matrix of the node's rows. Candidate thresholds
    are midpoints between adjacent distinct sorted values.
    """
    n = X.shape[0]
    cols = X[:, feats]
    order = np.argsort(cols, axis=0, kind="stable")
    xs = np.take_along_axis(cols, order, axis=0)
    left = np.cumsum(Y[order], axis=0)[:-1]             # (n-1, f, C)
    total = Y.sum(axis=0)
    right = total - left
    nl = np.arange(1, n, dtype=np.float64)[:, None]
    nr = n - nl
    # n_l * gini_l + n_r * gini_r, up to the constant n
    weighted = -(np.sum(left * left, axis=2) / nl + np.sum(right * right, axis=2) / nr)
    valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
    if not np.any(valid):
        return None
    weighted = np.where(valid, weighted, np.inf)
    parent = -np.sum(total * total) / n
    flat = int(np.argmin(weighted.T))                    # feature-major: lowest feature wins ties
    j, i = divmod(flat, n - 1)
    if not parent - weighted[i, j] > 1e-12:
        return None
    return int(feats[j]), 0.5 * (xs[i, j] + xs[i + 1, j])


def build_tree(X: np.ndarray, y: np.ndarray, n_classes: int, cfg: ForestConfig,
               rng: Rng) -> Tree:
    d = X.shape[1]
    m = cfg.features_per_split or math.ceil(math.sqrt(d))
    m = min(m, d)
    gen = rng.gen
    Yall = np.eye(n_classes)[y]
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(rows):
        counts = Yall[rows].sum(axis=0)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append((counts + 1.0) / (counts.sum() + n_classes))
        return len(feature) - 1

    root = new_node(np.arange(X.shape[0]))
    stack = [(root, np.arange(X.shape[0]), 0)]
    while stack:
        node, rows, depth = stack.pop()
        if depth >= cfg.max_depth or rows.size < 2 * cfg.min_leaf:
            continue
        Yn = Yall[rows]
        if np.max(Yn.sum(axis=0)) == rows.size:
            continue
        feats = np.sort(gen.choice(d, m, replace=False))
        split = _best_split(X[rows], Yn, feats, cfg.min_leaf)
        if split is None:
            continue
        f, thr = split
        mask = X[rows, f] <= thr
        lrows, rrows = rows[mask], rows[~mask]
        li, ri = new_node(lrows), new_node(rrows)
        feature[node], threshold[node], left[node], right[node] = f, thr, li, ri
        stack.append((ri, rrows, depth + 1))
        stack.append((li, lrows, depth + 1))
    return Tree(np.array(feature), np.array(threshold), np.array(left),
                np.array(right), np.array(value))


class HeadPosterior:
    """Common surface of fitted heads."""

    variant: str
    n_classes: int
    input_dim: int

    @property
    def K(self) -> int:
        raise NotImplementedError

    def _members(self, Z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict_members(self, Z) -> np.ndarray:
        Z = as_matrix(Z, "Z", cols=self.input_dim)
        return self._members(Z)

    def predict_marginal(self, Z) -> np.ndarray:
        return self.predict_members(Z).mean(axis=1)


@dataclass
class ForestHead(HeadPosterior):
    trees: list[Tree]
    n_classes: int
    input_dim: int
    variant: str = "random_forest"

    @property
    def K(self) -> int:
        return len(self.trees)

    def _members(self, Z):
        out = np.empty((Z.shape[0], len(self.trees), self.n_classes))
        for k, tree in enumerate(self.trees):
            out[:, k] = tree.predict(Z)
        return out


def fit_forest(Z, y, cfg: ForestConfig, n_classes: int | None = None) -> ForestHead:
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise ContractError("fit_forest: empty input")
    Z = as_matrix(Z, "Z")
    if y.shape != (Z.shape[0],):
        raise ContractError("fit_forest: label count does not match rows")
    C = n_classes or int(y.max()) + 1
    if y.min() < 0 or y.max() >= C:
        raise ContractError(f"labels must lie in [0, {C})")
    rng = Rng(cfg.seed, ("forest",))
    n = Z.shape[0]
    trees = []
    for t in range(cfg.n_trees):
        trng = rng.child("tree", t)
        rows = trng.child("bootstrap").gen.integers(0, n, n) if cfg.bootstrap else np.arange(n)
        trees.append(build_tree(Z[rows], y[rows], C, cfg, trng.child("splits")))
    return ForestHead(trees, C, Z.shape[1])


# ---------------------------------------------------------------------------
# Laplace-approximated one-hidden-layer network


@dataclass(frozen=True)
class LaplaceConfig:
    hidden: int = 128
    n_samples: int = 100
    tempering: float | None = None     # None -> parameter count of the network
    map_steps: int = 1000
    learning_rate: float = 1e-2
    hessian_floor: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1 or self.n_samples < 1 or self.map_steps < 0:
            raise ValueError("hidden, n_samples >= 1 and map_steps >= 0 required")


def laplace_map_loss(net: Mlp, Z: np.ndarray, y: np.ndarray, tempering: float):
    """``tempering * sum NLL + 0.5 * ||theta||^2`` and its gradient."""
    params = net.params()
    reg = 0.5 * sum(float(np.sum(p * p)) for p in params)
    if Z.shape[0] == 0:
        return reg, [p.copy() for p in params]
    _, cache = net.forward_cache(Z)
    logp = log_softmax(cache["logits"])
    rows = np.arange(Z.shape[0])
    nll = -float(np.sum(logp[rows, y]))
    g = np.exp(logp)
    g[rows, y] -= 1.0
    grads, _ = net.backward(cache, tempering * g, wrt="logits")
    return tempering * nll + reg, [gr + p for gr, p in zip(grads, params)]


def diagonal_ggn(net: Mlp, Z: np.ndarray) -> list[np.ndarray]:
    """Diagonal of sum_n J_n^T (diag(p_n) - p_n p_n^T) J_n for a 1-hidden-layer net."""
    W1, b1, W2, b2 = net.params()
    if Z.shape[0] == 0:
        return [np.zeros_like(p) for p in (W1, b1, W2, b2)]
    out, cache = net.forward_cache(Z)
    p = out                                        # (N, C)
    h = np.tanh(cache["pre"][0]) if net.hidden == "tanh" else np.maximum(cache["pre"][0], 0)
    act = 1.0 - h * h if net.hidden == "tanh" else (cache["pre"][0] > 0).astype(float)
    pv = p - p * p                                 # per-class variance p(1-p)
    gW2 = (h * h).T @ pv                           # (H, C)
    gb2 = pv.sum(axis=0)
    # variance over classes of W2[j, c] under p_n: E[w^2] - E[w]^2
    ew = p @ W2.T                                  # (N, H)
    ew2 = p @ (W2 * W2).T
    var_w = ew2 - ew * ew
    s = act * act * var_w                          # (N, H)
    gW1 = (Z * Z).T @ s                            # (d, H)
    gb1 = s.sum(axis=0)
    return [gW1, gb1, gW2, gb2]


@dataclass
class LaplaceHead(HeadPosterior):
    net: Mlp
    samples: list[list[np.ndarray]]
    posterior_var: list[np.ndarray]
    n_classes: int
    input_dim: int
    tempering: float
    map_loss: tuple[float, float] = (float("nan"), float("nan"))
    variant: str = "laplace_mlp"

    @property
    def K(self) -> int:
        return len(self.samples)

    def _members(self, Z):
        out = np.empty((Z.shape[0], len(self.samples), self.n_classes))
        probe = self.net.copy()
        for k, theta in enumerate(self.samples):
            W1, b1, W2, b2 = theta
            probe.weights, probe.biases = [W1, W2], [b1, b2]
            out[:, k] = probe.forward(Z)
        return out


def fit_laplace(Z, y, cfg: LaplaceConfig, n_classes: int | None = None,
                input_dim: int | None = None) -> LaplaceHead:
    """MAP by Adam, then a diagonal Gauss-Newton Laplace posterior with cached samples."""
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if Z.size == 0:
        if n_classes is None or input_dim is None:
            raise ContractError("n_classes and input_dim are required without data")
        Z = np.zeros((0, input_dim))
    if Z.ndim == 1:
        Z = Z[:, None]
    C = n_classes or int(y.max()) + 1
    if y.size and (y.min() < 0 or y.max() >= C):
        raise ContractError(f"labels must lie in [0, {C})")
    d = Z.shape[1]
    rng = Rng(cfg.seed, ("laplace",))
    net = Mlp.init([d, cfg.hidden, C], rng.child("init"), hidden="tanh", output="softmax")
    T = float(net.n_params()) if cfg.tempering is None else float(cfg.tempering)
    params = net.params()
    if Z.shape[0] == 0:
        for p in params:
            p[...] = 0.0                           # prior mode
        start = end = 0.0
    else:
        start = laplace_map_loss(net, Z, y, T)[0]
        opt = AdamState.for_params(params, lr=cfg.learning_rate)
        for step in range(cfg.map_steps):
            loss, grads = laplace_map_loss(net, Z, y, T)
            if not np.isfinite(loss):
                raise FloatingPointError(f"laplace MAP: non-finite loss at step {step}")
            adam_step(opt, params, grads)
        end = laplace_map_loss(net, Z, y, T)[0]
    ggn = diagonal_ggn(net, Z)
    var = [1.0 / np.maximum(T * g + 1.0, cfg.hessian_floor) for g in ggn]
    gen = rng.child("samples").gen
    samples = [[p + np.sqrt(v) * gen.standard_normal(p.shape) for p, v in zip(params, var)]
               for _ in range(cfg.n_samples)]
    return LaplaceHead(net, samples, var, C, d, T, (start, end))


def predict_members(head: HeadPosterior, Z) -> np.ndarray:
    return head.predict_members(Z)
