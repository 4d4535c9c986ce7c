"""Raw datasets and messy-pool construction.

A messy pool mixes a few *target* classes (the task) with many *redundant*
classes, at a chosen imbalance ratio (redundant-class count over
target-class count). Redundant classes are collapsed into one task label.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import Rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class IdxMagicError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class CountMismatchError(DatasetError):
    pass


class CsvFormatError(DatasetError):
    pass


class InsufficientExamplesError(DatasetError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise EmptyDatasetError("empty dataset")
        if self.labels.shape != (self.features.shape[0],):
            raise CountMismatchError(
                f"{self.labels.shape[0]} labels for {self.features.shape[0]} rows")
        if np.any(self.labels < 0):
            raise DatasetError("labels must be non-negative")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError("features contain non-finite values")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1


@dataclass(frozen=True)
class TaskSpec:
    """Target raw classes map to task labels 0..t-1; everything else to t."""

    target_classes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "target_classes", tuple(int(c) for c in self.target_classes))
        if not self.target_classes:
            raise ValueError("at least one target class is required")
        if len(set(self.target_classes)) != len(self.target_classes):
            raise ValueError(f"duplicate target classes: {self.target_classes}")

    @property
    def redundant_class_index(self) -> int:
        return len(self.target_classes)

    @property
    def task_class_count(self) -> int:
        return len(self.target_classes) + 1

    def task_labels(self, raw_labels) -> np.ndarray:
        raw = np.asarray(raw_labels, dtype=np.int64)
        out = np.full(raw.shape, self.redundant_class_index, dtype=np.int64)
        for i, c in enumerate(self.target_classes):
            out[raw == c] = i
        return out


@dataclass(frozen=True)
class MessyPoolConfig:
    imbalance_ratio: float = 10.0
    redundant_ratio: float | None = None
    pool_size: int = 2000
    test_size: int = 400
    target_sample_size: int = 500
    seed: int = 0

    def __post_init__(self):
        if not self.imbalance_ratio >= 1.0:
            raise ValueError(f"imbalance_ratio must be >= 1, got {self.imbalance_ratio}")
        if self.redundant_ratio is not None and not 0.0 < self.redundant_ratio <= 1.0:
            raise ValueError(f"redundant_ratio must lie in (0, 1], got {self.redundant_ratio}")
        for name in ("pool_size", "test_size", "target_sample_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class SyntheticConfig:
    """Gaussian class clusters with task dimensions and nuisance dimensions.

    Target classes and the (shared) redundant cluster sit at distinct centres
    in the first ``d_task`` dimensions. Nuisance dimensions carry
    ``nuisance_scale``-sized noise for every class; redundant classes differ
    from one another only through their nuisance-dimension means.
    """

    n_targets: int = 3
    n_redundant: int = 7
    d_task: int = 3
    d_nuisance: int = 7
    nuisance_scale: float = 3.0
    class_sep: float = 4.0
    redundant_spread: float = 3.0
    n_per_class: int = 1200


@dataclass
class PoolSplits:
    pool: Dataset                  # labels are task labels, hidden from the learner
    test: Dataset                  # labels are task labels
    target_samples: np.ndarray
    initial_labeled: np.ndarray
    task: TaskSpec
    pool_raw_labels: np.ndarray
    source_index: dict[str, np.ndarray] = field(default_factory=dict)
    # Features used to fit label-free encoders; defaults to the pool itself.
    encoder_pool: np.ndarray | None = None

    def encoder_features(self) -> np.ndarray:
        return self.pool.features if self.encoder_pool is None else self.encoder_pool


# ---------------------------------------------------------------------------
# Loaders


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"{what}: expected {n} bytes, got {len(data)}")
    return data


def read_idx_images(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, = struct.unpack(">I", _read_exact(f, 4, f"{path} magic"))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxMagicError(f"{path}: bad image magic 0x{magic:08x}")
        count, rows, cols = struct.unpack(">III", _read_exact(f, 12, f"{path} header"))
        body = _read_exact(f, count * rows * cols, f"{path} pixels")
    return np.frombuffer(body, dtype=np.uint8).reshape(count, rows * cols)


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, = struct.unpack(">I", _read_exact(f, 4, f"{path} magic"))
        if magic != IDX_LABEL_MAGIC:
            raise IdxMagicError(f"{path}: bad label magic 0x{magic:08x}")
        count, = struct.unpack(">I", _read_exact(f, 4, f"{path} header"))
        body = _read_exact(f, count, f"{path} labels")
    return np.frombuffer(body, dtype=np.uint8).astype(np.int64)


def write_idx(image_path, label_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(image_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(label_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def load_idx(image_path, label_path) -> Dataset:
    images = read_idx_images(image_path)
    labels = read_idx_labels(label_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.shape[0] == 0:
        raise EmptyDatasetError("empty dataset")
    return Dataset(images.astype(np.float64) / 255.0, labels)


def load_csv(path, label_column: str) -> Dataset:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDatasetError(f"{path}: empty dataset") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise CsvFormatError(f"{path}: unknown label column {label_column!r}")
        li = header.index(label_column)
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(
                    f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                labels.append(int(row[li].strip()))
            except ValueError:
                raise CsvFormatError(
                    f"{path}:{lineno}: label {row[li]!r} is not an integer") from None
            try:
                feats.append([float(v) for j, v in enumerate(row) if j != li])
            except ValueError as exc:
                raise CsvFormatError(f"{path}:{lineno}: {exc}") from None
    if not feats:
        raise EmptyDatasetError(f"{path}: empty dataset")
    names = [h for j, h in enumerate(header) if j != li]
    return Dataset(np.array(feats, dtype=np.float64).reshape(len(feats), len(names)),
                   np.array(labels))


# ---------------------------------------------------------------------------
# Synthetic messy data


def _spread_centres(n: int, dim: int, radius: float, rng: Rng, tries: int = 64) -> np.ndarray:
    best, best_gap = None, -1.0
    for i in range(tries):
        c = rng.child("try", i).gen.normal(size=(n, dim))
        c *= radius / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-12)
        if n > 1:
            gaps = np.linalg.norm(c[:, None] - c[None], axis=-1)
            gap = gaps[np.triu_indices(n, 1)].min()
        else:
            gap = 0.0
        if gap > best_gap:
            best, best_gap = c, gap
    return best


def make_synthetic_messy(config: SyntheticConfig, seed: int) -> tuple[Dataset, TaskSpec]:
    t, r = config.n_targets, config.n_redundant
    if t < 2:
        raise ValueError(f"need at least 2 target classes, got {t}")
    if config.d_task < 1:
        raise ValueError(f"d_task must be >= 1, got {config.d_task}")
    if r < 0 or config.d_nuisance < 0 or config.n_per_class < 1:
        raise ValueError("n_redundant, d_nuisance must be >= 0 and n_per_class >= 1")
    if config.d_nuisance > 0 and not config.nuisance_scale > 1.0:
        raise ValueError("nuisance_scale must exceed 1 when nuisance dimensions are present")
    rng = Rng(seed, ("synthetic",))
    centres = _spread_centres(t + 1, config.d_task, config.class_sep, rng.child("centres"))
    red_means = rng.child("redundant").gen.normal(
        scale=config.redundant_spread, size=(r, config.d_nuisance))
    n = config.n_per_class
    noise = rng.child("noise").gen
    xs, ys = [], []
    for c in range(t + r):
        task_mean = centres[c] if c < t else centres[t]
        nuis_mean = np.zeros(config.d_nuisance) if c < t else red_means[c - t]
        x_task = task_mean + noise.normal(size=(n, config.d_task))
        x_nuis = nuis_mean + config.nuisance_scale * noise.normal(size=(n, config.d_nuisance))
        xs.append(np.hstack([x_task, x_nuis]))
        ys.append(np.full(n, c))
    names = [f"target{c}" for c in range(t)] + [f"redundant{c}" for c in range(r)]
    return Dataset(np.vstack(xs), np.concatenate(ys), names), TaskSpec(tuple(range(t)))


# ---------------------------------------------------------------------------
# Messy pools


def _round_robin(total: int, n: int) -> list[int]:
    base, rem = divmod(total, n)
    return [base + (1 if i < rem else 0) for i in range(n)]


def pool_quotas(n_targets: int, n_redundant: int, pool_size: int,
                imbalance_ratio: float) -> tuple[list[int], list[int]]:
    """Per-class pool counts ``(target_quotas, redundant_quotas)``.

    Every target class gets ``round(pool_size / (t + r * IR))`` examples and
    the rest of the pool is spread over redundant classes round-robin, so the
    mean redundant count stays within one example of ``IR`` times the target
    count whenever ``t <= r * IR``.
    """
    if n_redundant == 0:
        return _round_robin(pool_size, n_targets), []
    tq = math.floor(pool_size / (n_targets + n_redundant * imbalance_ratio) + 0.5)
    if tq < 1:
        raise InsufficientExamplesError(
            f"pool_size={pool_size} at IR={imbalance_ratio} leaves no target examples")
    rest = pool_size - n_targets * tq
    return [tq] * n_targets, _round_robin(rest, n_redundant)


def _combine(base, task: TaskSpec) -> tuple[Dataset, list[int]]:
    """Merge a (target source, redundant source) pair into one dataset."""
    if isinstance(base, Dataset):
        present = sorted(set(np.unique(base.labels).tolist()))
        redundant = [c for c in present if c not in task.target_classes]
        return base, redundant
    target_ds, redundant_ds = base
    keep = np.isin(target_ds.labels, task.target_classes)
    offset = max(int(target_ds.labels.max()), max(task.target_classes)) + 1
    feats = np.vstack([target_ds.features[keep], redundant_ds.features])
    labels = np.concatenate([target_ds.labels[keep], redundant_ds.labels + offset])
    redundant = sorted(set((redundant_ds.labels + offset).tolist()))
    return Dataset(feats, labels), redundant


def build_messy_pool(base: Dataset | Sequence[Dataset], task: TaskSpec,
                     cfg: MessyPoolConfig, initial_per_class: int = 0) -> PoolSplits:
    """Split ``base`` into an imbalanced pool, balanced test set and target samples.

    ``base`` is either one dataset (non-target classes become redundant) or a
    pair ``(target_source, redundant_source)`` in which every class of the
    second dataset is redundant. Indices in ``source_index`` refer to the
    (combined) source dataset.
    """
    data, redundant = _combine(base, task)
    present = set(np.unique(data.labels).tolist())
    missing = [c for c in task.target_classes if c not in present]
    if missing:
        raise InsufficientExamplesError(f"target classes {missing} absent from the data")
    t = len(task.target_classes)
    if cfg.redundant_ratio is not None:
        n_red = int(round(t / cfg.redundant_ratio)) - t
        if n_red > len(redundant):
            raise InsufficientExamplesError(
                f"redundant_ratio={cfg.redundant_ratio} needs {n_red} redundant classes, "
                f"only {len(redundant)} available")
        redundant = redundant[:n_red]
    rng = Rng(cfg.seed, ("messy_pool",))

    tq, rq = pool_quotas(t, len(redundant), cfg.pool_size, cfg.imbalance_ratio)
    n_task = t + (1 if redundant else 0)
    test_per_label = _round_robin(cfg.test_size, n_task)
    red_test = _round_robin(test_per_label[t], len(redundant)) if redundant else []

    pool_idx, test_idx, held_target = [], [], []
    classes = list(task.target_classes) + redundant
    pool_q = tq + rq
    test_q = test_per_label[:t] + red_test
    for c, pq, sq in zip(classes, pool_q, test_q):
        members = np.flatnonzero(data.labels == c)
        if members.size < pq + sq:
            raise InsufficientExamplesError(
                f"class {c}: need {pq + sq} examples (pool {pq} + test {sq}), have {members.size}")
        perm = rng.child("class", c).gen.permutation(members)
        pool_idx.append(perm[:pq])
        test_idx.append(perm[pq:pq + sq])
        if c in task.target_classes:
            held_target.append(perm[pq + sq:])
    held = np.sort(np.concatenate(held_target))
    if held.size < cfg.target_sample_size:
        raise InsufficientExamplesError(
            f"need {cfg.target_sample_size} held-out target examples, have {held.size}")
    target_idx = rng.child("target_samples").gen.choice(held, cfg.target_sample_size, replace=False)
    pool_idx = rng.child("pool_order").gen.permutation(np.concatenate(pool_idx))
    test_idx = rng.child("test_order").gen.permutation(np.concatenate(test_idx))

    pool = Dataset(data.features[pool_idx], task.task_labels(data.labels[pool_idx]))
    test = Dataset(data.features[test_idx], task.task_labels(data.labels[test_idx]))
    splits = PoolSplits(
        pool=pool, test=test, target_samples=data.features[target_idx],
        initial_labeled=np.zeros(0, dtype=np.int64), task=task,
        pool_raw_labels=data.labels[pool_idx],
        source_index={"pool": pool_idx, "test": test_idx, "target_samples": target_idx},
    )
    if initial_per_class:
        splits.initial_labeled = sample_initial_labeled(splits, initial_per_class, cfg.seed)
    return splits


def sample_initial_labeled(splits: PoolSplits, per_class: int, seed: int) -> np.ndarray:
    """``per_class`` pool indices from every task class present, without replacement."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    labels = splits.pool.labels
    rng = Rng(seed, ("initial_labeled",))
    chosen = []
    for k in range(splits.task.task_class_count):
        members = np.flatnonzero(labels == k)
        if k == splits.task.redundant_class_index and members.size == 0:
            continue  # all-target pool: no redundant category in use
        if members.size < per_class:
            raise InsufficientExamplesError(
                f"task class {k} has {members.size} pool members, need {per_class}")
        chosen.append(rng.child("class", k).gen.choice(members, per_class, replace=False))
    return np.concatenate(chosen).astype(np.int64)


def with_initial(splits: PoolSplits, per_class: int, seed: int) -> PoolSplits:
    return replace(splits, initial_labeled=sample_initial_labeled(splits, per_class, seed))
