"""The pool-based active-learning loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .acquisition import AcquisitionConfig, power_select, score_pool
from .datasets import Dataset, PoolSplits
from .heads import ForestConfig, HeadPosterior, LaplaceConfig, fit_forest, fit_laplace
from .numerics import ContractError, Rng
from .representations import (EncoderModel, FineTuneConfig, Pretrained, SplitVaeConfig,
                              fit_identity, fit_pca, fit_td_ft, fit_td_split,
                              pretrain_autoencoder)

log = logging.getLogger(__name__)

TASK_DRIVEN = ("td_split", "td_ft")


@dataclass(frozen=True)
class EncoderSpec:
    variant: str = "pca"
    pca_dim: int = 3
    split: SplitVaeConfig = field(default_factory=SplitVaeConfig)
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)

    def __post_init__(self):
        if self.variant not in ("identity", "pca", "td_split", "td_ft"):
            raise ValueError(f"unknown encoder variant {self.variant!r}")


@dataclass(frozen=True)
class HeadSpec:
    variant: str = "random_forest"
    forest: ForestConfig = field(default_factory=ForestConfig)
    laplace: LaplaceConfig = field(default_factory=LaplaceConfig)

    def __post_init__(self):
        if self.variant not in ("random_forest", "laplace_mlp"):
            raise ValueError(f"unknown head variant {self.variant!r}")


@dataclass(frozen=True)
class ALConfig:
    budget: int = 500
    retrain_period: int = 5
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    head: HeadSpec = field(default_factory=HeadSpec)
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    initial_per_class: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.budget < self.acquisition.batch_size:
            raise ValueError(
                f"budget={self.budget} is smaller than the batch size {self.acquisition.batch_size}")
        if self.retrain_period < 1:
            raise ValueError("retrain_period must be >= 1")
        if self.initial_per_class < 1:
            raise ValueError("initial_per_class must be >= 1")

    @property
    def batch_size(self) -> int:
        return self.acquisition.batch_size


@dataclass
class RoundRecord:
    round: int
    labels: int
    accuracy: float
    target_count: int
    retrained: bool
    wall_ms: float

    def key(self) -> tuple:
        """Everything except wall time."""
        return (self.round, self.labels, self.accuracy, self.target_count, self.retrained)


class PoolState:
    """Labelled/unlabelled bookkeeping over pool indices."""

    def __init__(self, pool_size: int, initial: np.ndarray, labels: np.ndarray):
        self.size = pool_size
        self.unlabeled = np.ones(pool_size, dtype=bool)
        self.labeled_idx: list[int] = []
        self.labeled_y: list[int] = []
        self.round = 0
        self.add(initial, labels)

    def add(self, idx, labels) -> None:
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.size):
            raise ContractError("pool index out of range")
        if not np.all(self.unlabeled[idx]) or np.unique(idx).size != idx.size:
            raise ContractError("index acquired twice")
        self.unlabeled[idx] = False
        self.labeled_idx += idx.tolist()
        self.labeled_y += np.asarray(labels, dtype=np.int64).tolist()

    @property
    def unlabeled_idx(self) -> np.ndarray:
        return np.flatnonzero(self.unlabeled)

    @property
    def n_labeled(self) -> int:
        return len(self.labeled_idx)


def label_oracle(splits: PoolSplits, index) -> np.ndarray | int:
    """Task label(s) for pool index(es): targets keep their task index,
    every other raw class becomes the redundant category."""
    idx = np.asarray(index, dtype=np.int64)
    n = splits.pool_raw_labels.shape[0]
    if np.any(idx < 0) or np.any(idx >= n):
        raise IndexError(f"pool index out of range [0, {n})")
    out = splits.task.task_labels(splits.pool_raw_labels[idx])
    return int(out) if out.ndim == 0 else out


def evaluate(head: HeadPosterior, encoder: EncoderModel, test: Dataset) -> float:
    """Fraction of test points whose member-mean argmax equals the task label."""
    if len(test) == 0:
        raise ContractError("empty test set")
    pred = np.argmax(head.predict_marginal(encoder.head_inputs(test.features)), axis=1)
    return float(np.mean(pred == test.labels))


def _derived_seed(rng: Rng, *labels) -> int:
    return int(rng.child(*labels).gen.integers(0, 2**31 - 1))


class _EncoderFitter:
    def __init__(self, spec: EncoderSpec, splits: PoolSplits, rng: Rng):
        self.spec = spec
        self.splits = splits
        self.rng = rng
        self.pretrained: Pretrained | None = None

    def fit(self, round_: int, state: PoolState) -> EncoderModel:
        spec, splits = self.spec, self.splits
        feats = splits.encoder_features()
        if spec.variant == "identity":
            return fit_identity(feats)
        if spec.variant == "pca":
            return fit_pca(feats, spec.pca_dim)
        lx = splits.pool.features[state.labeled_idx]
        ly = np.array(state.labeled_y)
        C = splits.task.task_class_count
        if spec.variant == "td_split":
            cfg = replace(spec.split, seed=_derived_seed(self.rng, "td_split", round_))
            return fit_td_split(feats, lx, ly, cfg, n_classes=C)
        cfg = replace(spec.finetune, seed=_derived_seed(self.rng, "td_ft"))
        if self.pretrained is None:
            self.pretrained = pretrain_autoencoder(feats, cfg)
        return fit_td_ft(feats, lx, ly, cfg, pretrained=self.pretrained, n_classes=C)


def _fit_head(spec: HeadSpec, Z: np.ndarray, y: np.ndarray, n_classes: int, seed: int):
    if spec.variant == "random_forest":
        return fit_forest(Z, y, replace(spec.forest, seed=seed), n_classes=n_classes)
    return fit_laplace(Z, y, replace(spec.laplace, seed=seed), n_classes=n_classes,
                       input_dim=Z.shape[1])


def retrain_rounds(n_rounds: int, k: int) -> list[int]:
    return [r for r in range(1, n_rounds + 1) if (r - 1) % k == 0]


def run_active_learning(splits: PoolSplits, cfg: ALConfig, progress=None) -> list[RoundRecord]:
    """Run ``ceil(budget / batch)`` acquisition rounds; returns one record per round.

    Each round: (re)fit the encoder on schedule, fit the head on the encoded
    labelled set, score the unlabelled pool, power-sample a batch, label it,
    refit the head and evaluate on the test set.
    """
    rng = Rng(cfg.seed, ("active_learning",))
    initial = np.asarray(splits.initial_labeled, dtype=np.int64)
    if initial.size == 0:
        raise ContractError("no initial labelled set; call sample_initial_labeled first")
    state = PoolState(len(splits.pool), initial, label_oracle(splits, initial))
    n_rounds = math.ceil(cfg.budget / cfg.batch_size)
    C = splits.task.task_class_count
    t = len(splits.task.target_classes)
    fitter = _EncoderFitter(cfg.encoder, splits, rng.child("encoder"))
    task_driven = cfg.encoder.variant in TASK_DRIVEN
    encoder = head = None
    acquired = target_count = 0
    records: list[RoundRecord] = []
    for r in range(1, n_rounds + 1):
        t0 = time.perf_counter()
        state.round = r
        retrained = encoder is None or (task_driven and (r - 1) % cfg.retrain_period == 0)
        try:
            if retrained:
                encoder = fitter.fit(r, state)
                head = None
            if head is None:
                Z = encoder.head_inputs(splits.pool.features[state.labeled_idx])
                head = _fit_head(cfg.head, Z, np.array(state.labeled_y), C,
                                 _derived_seed(rng, "head", r, "pre"))
            candidates = state.unlabeled_idx
            n_take = min(cfg.batch_size, cfg.budget - acquired, candidates.size)
            scores = score_pool(head, encoder, splits.pool.features[candidates],
                                splits.target_samples, cfg.acquisition,
                                rng.child("scores", r))
            picked = candidates[power_select(scores, n_take, cfg.acquisition.power_beta,
                                             rng.child("select", r))]
            labels = label_oracle(splits, picked)
            state.add(picked, labels)
            acquired += picked.size
            target_count += int(np.sum(np.asarray(labels) < t))
            Z = encoder.head_inputs(splits.pool.features[state.labeled_idx])
            head = _fit_head(cfg.head, Z, np.array(state.labeled_y), C,
                             _derived_seed(rng, "head", r, "post"))
            acc = evaluate(head, encoder, splits.test)
        except Exception as exc:
            raise RuntimeError(f"active learning failed in round {r}: {exc}") from exc
        rec = RoundRecord(r, state.n_labeled, acc, target_count, retrained,
                          1000.0 * (time.perf_counter() - t0))
        records.append(rec)
        log.debug("round %d: labels=%d acc=%.4f targets=%d", r, rec.labels, acc, target_count)
        if progress is not None:
            progress(rec)
        if not state.unlabeled.any() and acquired < cfg.budget:
            log.warning("pool exhausted after %d acquisitions (budget %d)", acquired, cfg.budget)
            break
    return records
