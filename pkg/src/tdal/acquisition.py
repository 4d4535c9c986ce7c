"""Acquisition scores (EPIG, BALD, least confidence, random) and power batch selection.

All entropies are in nats. Member arrays have shape ``(K, C)`` for a single
input or ``(N, K, C)`` for a batch: K realisations of a C-class distribution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractError, Rng

STRATEGIES = ("epig", "bald", "confidence", "random")


@dataclass(frozen=True)
class AcquisitionConfig:
    strategy: str = "epig"
    n_realisations: int = 100
    n_target_samples: int = 500
    batch_size: int = 10
    power_beta: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.n_realisations < 1:
            raise ValueError("n_realisations must be >= 1")
        if self.strategy == "epig" and self.n_target_samples < 1:
            raise ValueError("n_target_samples must be >= 1 for epig")
        if self.power_beta < 0:
            raise ValueError("power_beta must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ScoreVector:
    scores: np.ndarray
    strategy: str

    def __len__(self) -> int:
        return self.scores.size


def _xlogx(p: np.ndarray) -> np.ndarray:
    safe = np.where(p > 0, p, 1.0)
    return np.where(p > 0, p * np.log(safe), 0.0)


def entropy(p, axis: int = -1) -> np.ndarray | float:
    """Shannon entropy in nats, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ContractError("probabilities must be non-negative")
    if np.any(np.abs(p.sum(axis=axis) - 1.0) > 1e-6):
        raise ContractError("probabilities must sum to 1")
    h = -np.sum(_xlogx(p), axis=axis)
    return float(h) if np.ndim(h) == 0 else h


def _members(m, name: str = "members") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim not in (2, 3):
        raise ContractError(f"{name}: expected (K, C) or (N, K, C), got shape {m.shape}")
    return m


def bald(member_probs) -> np.ndarray | float:
    """Mutual information between the label and the realisation index."""
    m = _members(member_probs)
    return entropy(m.mean(axis=-2)) - np.mean(entropy(m), axis=-1)


def confidence_score(member_probs) -> np.ndarray | float:
    """1 - max_y of the member-mean probability."""
    m = _members(member_probs)
    out = 1.0 - m.mean(axis=-2).max(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def epig_batch(candidates: np.ndarray, targets: np.ndarray, chunk: int | None = None) -> np.ndarray:
    """EPIG for every candidate in ``(N, K, C)`` against targets ``(M, K, C)``.

    For candidate n and target m the joint over (y, y*) is the member average
    of outer products, ``J = P^T Q / K``. Its mutual information is
    ``H(p) + H(q) - H(J)`` because the marginals of ``J`` are exactly the
    member means ``p`` and ``q``.
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if candidates.ndim != 3 or targets.ndim != 3:
        raise ContractError("epig_batch expects (N, K, C) candidates and (M, K, C) targets")
    N, K, C = candidates.shape
    M, Kt, Ct = targets.shape
    if Kt != K:
        raise ContractError(f"realisation count mismatch: candidates K={K}, targets K={Kt}")
    if K == 1:
        return np.zeros(N)          # one realisation: the joint factorises exactly
    h_p = -_xlogx(candidates.mean(axis=1)).sum(axis=1)                  # (N,)
    h_q = float(np.mean(-_xlogx(targets.mean(axis=1)).sum(axis=1)))
    q2 = targets.transpose(1, 0, 2).reshape(K, M * Ct)
    if chunk is None:
        chunk = max(1, int(4_000_000 // max(1, M * C * Ct)))
    h_joint = np.empty(N)
    for s in range(0, N, chunk):
        p = candidates[s:s + chunk]
        n = p.shape[0]
        joint = (p.transpose(0, 2, 1).reshape(n * C, K) @ q2) / K       # (n*C, M*Ct)
        joint = joint.reshape(n, C, M, Ct)
        h_joint[s:s + chunk] = np.mean(-_xlogx(joint).sum(axis=(1, 3)), axis=1)
    return h_p + h_q - h_joint


def epig(candidate_members, target_members) -> float:
    """EPIG of one candidate ``(K, C)`` against a list of M target member matrices."""
    cand = np.asarray(candidate_members, dtype=np.float64)
    targ = np.asarray(target_members, dtype=np.float64)
    if cand.ndim != 2:
        raise ContractError("candidate members must be (K, C)")
    if targ.ndim == 2:
        targ = targ[None]
    return float(epig_batch(cand[None], targ)[0])


def power_select(scores, batch_size: int, beta: float, rng: Rng) -> np.ndarray:
    """Sample ``batch_size`` distinct indices, each draw with probability
    proportional to ``score ** beta`` over the remaining candidates.

    ``beta == 0`` and all-zero remaining scores both fall back to uniform.
    """
    s = np.asarray(getattr(scores, "scores", scores), dtype=np.float64).copy()
    n = s.size
    if batch_size > n:
        raise ContractError(f"batch of {batch_size} requested from {n} candidates")
    if not np.all(np.isfinite(s)):
        raise ContractError("scores must be finite")
    if np.any(s < -1e-9):
        raise ContractError("power selection needs non-negative scores")
    s = np.clip(s, 0.0, None)
    if beta == 0:
        w = np.ones(n)
    else:
        with np.errstate(divide="ignore"):
            logs = np.log(s)
        top = np.max(logs)
        w = np.exp(beta * (logs - top)) if np.isfinite(top) else np.zeros(n)
    gen = rng.gen
    remaining = np.ones(n, dtype=bool)
    chosen = []
    for _ in range(batch_size):
        wr = np.where(remaining, w, 0.0)
        total = wr.sum()
        if not total > 0:
            wr = remaining.astype(np.float64)
            total = wr.sum()
        cdf = np.cumsum(wr)
        i = int(np.searchsorted(cdf, gen.random() * total, side="right"))
        if i >= n or wr[i] == 0:      # rounding at the top of the cdf
            i = int(np.flatnonzero(wr)[-1])
        chosen.append(i)
        remaining[i] = False
    return np.array(chosen, dtype=np.int64)


def score_pool(head, encoder, pool_features, target_samples, cfg: AcquisitionConfig,
               rng: Rng | None = None) -> ScoreVector:
    """Per-candidate acquisition scores for ``pool_features``."""
    n = np.asarray(pool_features).shape[0]
    if cfg.strategy == "random":
        rng = rng or Rng(cfg.seed, ("acquisition",))
        return ScoreVector(rng.child("random_scores").gen.random(n), "random")
    K = min(cfg.n_realisations, head.K)
    cand = head.predict_members(encoder.head_inputs(pool_features))[:, :K]
    if cfg.strategy == "bald":
        scores = bald(cand)
    elif cfg.strategy == "confidence":
        scores = confidence_score(cand)
    else:
        if target_samples is None or len(target_samples) == 0:
            raise ContractError("epig needs target samples")
        targets = np.asarray(target_samples)[: cfg.n_target_samples]
        targ = head.predict_members(encoder.head_inputs(targets))[:, :K]
        scores = epig_batch(cand, targ)
    return ScoreVector(np.asarray(scores, dtype=np.float64), cfg.strategy)
