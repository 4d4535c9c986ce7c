"""Learning-curve SVG: mean test accuracy vs labels with a +/-1 standard error band."""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

from .experiment import read_rounds_csv

WIDTH, HEIGHT = 720, 440
MARGIN = {"left": 70, "right": 170, "top": 30, "bottom": 60}
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"]


class ReportError(ValueError):
    pass


@dataclass
class Curve:
    name: str
    labels: list[int]
    mean: list[float]
    stderr: list[float]
    n_seeds: int


def load_curve(name: str, csv_paths: list[Path]) -> Curve:
    runs = []
    for p in csv_paths:
        try:
            runs.append(read_rounds_csv(p))
        except (ValueError, OSError) as exc:
            raise ReportError(str(exc)) from None
    lengths = {len(r) for r in runs}
    if len(lengths) != 1:
        raise ReportError(f"{name}: runs have different round counts {sorted(lengths)}")
    labels, mean, se = [], [], []
    for rows in zip(*runs):
        xs = {row["labels"] for row in rows}
        if len(xs) != 1:
            raise ReportError(f"{name}: seeds disagree on label counts at round {rows[0]['round']}")
        accs = [row["accuracy"] for row in rows]
        labels.append(xs.pop())
        mean.append(statistics.fmean(accs))
        se.append(statistics.stdev(accs) / math.sqrt(len(accs)) if len(accs) > 1 else 0.0)
    return Curve(name, labels, mean, se, len(runs))


def collect_curves(run_dir) -> list[Curve]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"{run_dir}: not a directory")
    direct = sorted(run_dir.glob("rounds_*.csv"))
    if direct:
        return [load_curve(run_dir.name, direct)]
    curves = []
    for sub in sorted(p for p in run_dir.iterdir() if p.is_dir()):
        files = sorted(sub.glob("rounds_*.csv"))
        if files:
            curves.append(load_curve(sub.name, files))
    if not curves:
        raise ReportError(f"{run_dir}: no rounds_*.csv files found")
    return curves


class Axes:
    """Data-to-pixel transform; y always spans accuracy [0, 1]."""

    def __init__(self, xmin: float, xmax: float):
        if xmax <= xmin:
            xmin, xmax = xmin - 1.0, xmax + 1.0
        self.xmin, self.xmax = xmin, xmax
        self.x0 = MARGIN["left"]
        self.w = WIDTH - MARGIN["left"] - MARGIN["right"]
        self.y0 = MARGIN["top"]
        self.h = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(self, x: float) -> float:
        return self.x0 + (x - self.xmin) / (self.xmax - self.xmin) * self.w

    def py(self, y: float) -> float:
        return self.y0 + (1.0 - y) * self.h


def _pts(pairs) -> str:
    return " ".join(f"{x:.4f},{y:.4f}" for x, y in pairs)


def render_svg(curves: list[Curve]) -> str:
    xs = [x for c in curves for x in c.labels]
    ax = Axes(min(xs), max(xs))
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    # axes, ticks
    bottom = ax.y0 + ax.h
    out.append(f'<g class="axes" stroke="#333">'
               f'<line x1="{ax.x0}" y1="{bottom}" x2="{ax.x0 + ax.w}" y2="{bottom}"/>'
               f'<line x1="{ax.x0}" y1="{ax.y0}" x2="{ax.x0}" y2="{bottom}"/></g>')
    for i in range(6):
        y = i / 5
        out.append(f'<text x="{ax.x0 - 8}" y="{ax.py(y) + 4:.2f}" text-anchor="end">{y:.1f}</text>')
        out.append(f'<line x1="{ax.x0}" y1="{ax.py(y):.2f}" x2="{ax.x0 + ax.w}" '
                   f'y2="{ax.py(y):.2f}" stroke="#eee"/>')
    for i in range(6):
        x = ax.xmin + i * (ax.xmax - ax.xmin) / 5
        out.append(f'<text x="{ax.px(x):.2f}" y="{bottom + 18}" text-anchor="middle">{x:.0f}</text>')
    out.append(f'<text x="{ax.x0 + ax.w / 2}" y="{HEIGHT - 15}" text-anchor="middle">labels</text>')
    out.append(f'<text x="18" y="{ax.y0 + ax.h / 2}" text-anchor="middle" '
               f'transform="rotate(-90 18 {ax.y0 + ax.h / 2})">test accuracy</text>')
    for i, c in enumerate(curves):
        color = PALETTE[i % len(PALETTE)]
        name = escape(c.name)
        upper = [(ax.px(x), ax.py(m + s)) for x, m, s in zip(c.labels, c.mean, c.stderr)]
        lower = [(ax.px(x), ax.py(m - s)) for x, m, s in zip(c.labels, c.mean, c.stderr)]
        out.append(f'<polygon class="band" data-series="{name}" fill="{color}" '
                   f'fill-opacity="0.2" stroke="none" points="{_pts(upper + lower[::-1])}"/>')
        line = [(ax.px(x), ax.py(m)) for x, m in zip(c.labels, c.mean)]
        out.append(f'<polyline class="mean" data-series="{name}" fill="none" stroke="{color}" '
                   f'stroke-width="2" points="{_pts(line)}"/>')
        ly = ax.y0 + 10 + 20 * i
        lx = ax.x0 + ax.w + 15
        out.append(f'<g class="legend"><line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/><text x="{lx + 26}" y="{ly + 4}">'
                   f'{name} (n={c.n_seeds})</text></g>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_report(run_dir, out_path=None) -> Path:
    curves = collect_curves(run_dir)
    out_path = Path(out_path) if out_path else Path(run_dir) / "learning_curve.svg"
    out_path.write_text(render_svg(curves), encoding="utf-8")
    return out_path
