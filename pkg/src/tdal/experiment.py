"""Experiment configuration and seeded runs (the machinery behind the CLI)."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import statistics
import types
import typing
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

from pydantic import TypeAdapter, ValidationError

from .datasets import (MessyPoolConfig, PoolSplits, SyntheticConfig, TaskSpec,
                       build_messy_pool, load_csv, load_idx, make_synthetic_messy,
                       sample_initial_labeled)
from .engine import ALConfig, RoundRecord, run_active_learning
from .numerics import Rng

log = logging.getLogger(__name__)

CSV_HEADER = ["round", "labels", "accuracy", "target_count", "retrained", "wall_ms"]
SWEEP_AXES = ("imbalance_ratio", "redundant_ratio", "retrain_period")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    # idx: target source (e.g. MNIST) and redundant source (e.g. FashionMNIST)
    target_images: str | None = None
    target_labels: str | None = None
    redundant_images: str | None = None
    redundant_labels: str | None = None
    # csv
    csv_path: str | None = None
    label_column: str = "label"

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx", "csv"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "idx" and not (self.target_images and self.target_labels):
            raise ValueError("idx datasets need target_images and target_labels")
        if self.kind == "csv" and not self.csv_path:
            raise ValueError("csv datasets need csv_path")


@dataclass(frozen=True)
class EncoderPoolSpec:
    """Fit label-free encoders on a differently-imbalanced pool from the same data."""

    imbalance_ratio: float = 10.0
    pool_size: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...]
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    target_classes: tuple[int, ...] | None = None
    pool: MessyPoolConfig = field(default_factory=MessyPoolConfig)
    al: ALConfig = field(default_factory=ALConfig)
    encoder_pool: EncoderPoolSpec | None = None
    output_dir: str = "runs/experiment"
    record_wall_time: bool = False

    def __post_init__(self):
        if len(self.seeds) == 0:
            raise ValueError("seed list must be non-empty")
        if self.dataset.kind != "synthetic" and not self.target_classes:
            raise ValueError("target_classes are required for file datasets")


_ADAPTER = TypeAdapter(ExperimentConfig)


def _unknown_keys(tp, data, path=()) -> list[str]:
    """Dotted paths of keys in ``data`` that no dataclass field accepts."""
    if isinstance(tp, str) or data is None:
        return []
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        return next((_unknown_keys(a, data, path) for a in typing.get_args(tp)
                     if dataclasses.is_dataclass(a)), [])
    if not (dataclasses.is_dataclass(tp) and isinstance(data, dict)):
        return []
    hints = typing.get_type_hints(tp)
    out = []
    for key, val in data.items():
        if key not in hints:
            out.append(".".join(path + (key,)))
        else:
            out += _unknown_keys(hints[key], val, path + (key,))
    return out


def parse_config(data: dict) -> ExperimentConfig:
    unknown = _unknown_keys(ExperimentConfig, data)
    if unknown:
        raise ConfigError("unknown config field(s): " + ", ".join(unknown))
    try:
        return _ADAPTER.validate_python(data)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            lines.append(f"{loc}: {err['msg']}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _ADAPTER.dump_python(cfg, mode="json")


# ---------------------------------------------------------------------------
# Runs


@lru_cache(maxsize=4)
def _load_files(spec: DatasetSpec):
    if spec.kind == "csv":
        return load_csv(spec.csv_path, spec.label_column)
    target = load_idx(spec.target_images, spec.target_labels)
    if spec.redundant_images:
        return target, load_idx(spec.redundant_images, spec.redundant_labels)
    return target


def _dataset(cfg: ExperimentConfig, seed: int):
    if cfg.dataset.kind == "synthetic":
        data, task = make_synthetic_messy(cfg.dataset.synthetic, seed)
        if cfg.target_classes:
            task = TaskSpec(cfg.target_classes)
        return data, task
    return _load_files(cfg.dataset), TaskSpec(cfg.target_classes)


def build_splits(cfg: ExperimentConfig, seed: int) -> PoolSplits:
    data, task = _dataset(cfg, seed)
    splits = build_messy_pool(data, task, replace(cfg.pool, seed=seed))
    splits.initial_labeled = sample_initial_labeled(splits, cfg.al.initial_per_class, seed)
    if cfg.encoder_pool is not None:
        ep = cfg.encoder_pool
        enc_seed = int(Rng(seed, ("encoder_pool",)).gen.integers(0, 2**31 - 1))
        enc_cfg = replace(cfg.pool, imbalance_ratio=ep.imbalance_ratio,
                          pool_size=ep.pool_size or cfg.pool.pool_size, seed=enc_seed)
        splits.encoder_pool = build_messy_pool(data, task, enc_cfg).pool.features
    return splits


def run_seed(cfg: ExperimentConfig, seed: int) -> list[RoundRecord]:
    return run_active_learning(build_splits(cfg, seed), replace(cfg.al, seed=seed))


def records_to_csv(records: list[RoundRecord], wall_time: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow([r.round, r.labels, repr(float(r.accuracy)), r.target_count,
                    int(r.retrained), f"{r.wall_ms:.1f}" if wall_time else ""])
    return buf.getvalue()


def summarize(finals: dict[int, RoundRecord]) -> dict:
    accs = [r.accuracy for r in finals.values()]
    n = len(accs)
    stderr = statistics.stdev(accs) / math.sqrt(n) if n > 1 else 0.0
    return {
        "seeds": list(finals),
        "final_acc": [r.accuracy for r in finals.values()],
        "final_target_count": [r.target_count for r in finals.values()],
        "mean_final_acc": statistics.fmean(accs),
        "stderr_final_acc": stderr,
        "mean_target_count": statistics.fmean(r.target_count for r in finals.values()),
    }


def run_experiment(cfg: ExperimentConfig, out_dir=None, progress=None) -> dict:
    """One run per seed; writes rounds CSVs, summary.json and manifest.json."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")
    finals = {}
    for seed in cfg.seeds:
        records = run_seed(cfg, seed)
        (out / f"rounds_{seed}.csv").write_text(records_to_csv(records, cfg.record_wall_time),
                                                encoding="utf-8")
        finals[seed] = records[-1]
        if progress:
            progress(seed, records)
    summary = summarize(finals)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "retrain_period":
        return replace(cfg, al=replace(cfg.al, retrain_period=int(value)))
    if axis == "redundant_ratio":
        return replace(cfg, pool=replace(cfg.pool, redundant_ratio=float(value)))
    if axis == "imbalance_ratio":
        # with a separate encoder pool the sweep varies the encoder's pool
        if cfg.encoder_pool is not None:
            return replace(cfg, encoder_pool=replace(cfg.encoder_pool, imbalance_ratio=float(value)))
        return replace(cfg, pool=replace(cfg.pool, imbalance_ratio=float(value)))
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def run_sweep(cfg: ExperimentConfig, axis: str, values, out_dir=None, progress=None) -> list[dict]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    subs = []
    for v in values:
        try:
            subs.append((v, apply_axis(cfg, axis, v)))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{axis}={v}: {exc}") from None
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for v, sub in subs:
        summary = run_experiment(sub, out / f"{axis}={v}", progress)
        for seed, acc, tc in zip(summary["seeds"], summary["final_acc"],
                                 summary["final_target_count"]):
            rows.append({"value": v, "seed": seed, "final_accuracy": acc, "target_count": tc})
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["axis", "value", "seed", "final_accuracy", "target_count"])
        for r in rows:
            w.writerow([axis, r["value"], r["seed"], repr(float(r["final_accuracy"])),
                        r["target_count"]])
    return rows


def read_rounds_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(CSV_HEADER)} cells, got {len(row)}")
            rows.append({"round": int(row[0]), "labels": int(row[1]),
                         "accuracy": float(row[2]), "target_count": int(row[3]),
                         "retrained": bool(int(row[4]))})
    if not rows:
        raise ValueError(f"{path}: no rounds")
    return rows
