"""Tracking metrics, exit-depth and difficulty analyses, Pareto fronts and reports."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .inference import TrackResult, pooled

log = logging.getLogger(__name__)

PRECISION_PX = 5.0
CURVE_POINTS = 21


def _as_ious(ious) -> np.ndarray:
    a = np.asarray(list(ious) if not isinstance(ious, np.ndarray) else ious, dtype=np.float64)
    if a.size == 0:
        raise ValueError("no IoU values")
    if (a < 0).any() or (a > 1).any():
        raise ValueError("IoU values must lie in [0, 1]")
    return a


def success_auc(ious) -> float:
    """Area under the success curve, 0..100; the continuous integral equals 100 x mean IoU."""
    return 100.0 * float(_as_ious(ious).mean())


def success_curve(ious, points: int = CURVE_POINTS) -> tuple[np.ndarray, np.ndarray]:
    """Overlap thresholds in [0, 1] and the fraction of frames whose IoU exceeds each."""
    a = _as_ious(ious)
    thr = np.linspace(0.0, 1.0, points)
    return thr, (a[None, :] > thr[:, None]).mean(axis=1)


def sampled_auc(ious, points: int = CURVE_POINTS) -> float:
    """Trapezoid-rule area under the sampled curve; within half a grid step of :func:`success_auc`."""
    thr, frac = success_curve(ious, points)
    return 100.0 * float(np.sum((frac[1:] + frac[:-1]) * np.diff(thr)) / 2)


def precision_at(center_errors, threshold: float = PRECISION_PX) -> float:
    e = np.asarray(center_errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no center errors")
    return 100.0 * float((e <= threshold).mean())


# ---------------------------------------------------------------------------
# Pareto analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TradeoffPoint:
    speed: float  # frames per second, higher is better
    precision: float  # higher is better
    label: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.speed) and math.isfinite(self.precision)):
            raise ValueError(f"non-finite trade-off point {self}")
        if self.speed <= 0:
            raise ValueError(f"speed must be positive, got {self.speed}")


def dominates(p: TradeoffPoint, q: TradeoffPoint) -> bool:
    return (p.speed >= q.speed and p.precision >= q.precision
            and (p.speed > q.speed or p.precision > q.precision))


def pareto_front(points: Sequence[TradeoffPoint]) -> list[TradeoffPoint]:
    """Non-dominated points, fastest first (ties keep input order)."""
    if not points:
        raise ValueError("pareto_front needs at least one point")
    order = sorted(range(len(points)), key=lambda i: -points[i].speed)
    front = []
    best_faster = -math.inf  # best precision among strictly faster points
    i = 0
    while i < len(order):
        j = i
        speed = points[order[i]].speed
        while j < len(order) and points[order[j]].speed == speed:
            j += 1
        group = [points[o] for o in order[i:j]]
        top = max(p.precision for p in group)
        front += [p for p in group if p.precision > best_faster and p.precision >= top]
        best_faster = max(best_faster, top)
        i = j
    return front


def read_points(path: str | Path) -> list[TradeoffPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"speed", "precision"} <= set(rows[0]):
        raise ValueError(f"{path}: need columns speed, precision (and optionally label)")
    return [TradeoffPoint(float(r["speed"]), float(r["precision"]), r.get("label", "") or "") for r in rows]


def write_points(points: Iterable[TradeoffPoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["speed", "precision", "label"])
        for p in points:
            w.writerow([repr(p.speed), repr(p.precision), p.label])


def plot_front(points: Sequence[TradeoffPoint], path: str | Path) -> None:
    """Speed/precision scatter with the front highlighted (SVG by extension)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    front = pareto_front(points)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter([p.speed for p in points], [p.precision for p in points], c="0.6", label="operating points")
    fs = sorted(front, key=lambda p: p.speed)
    ax.plot([p.speed for p in fs], [p.precision for p in fs], "o-", c="C3", label="front")
    for p in points:
        if p.label:
            ax.annotate(p.label, (p.speed, p.precision), fontsize=7)
    ax.set_xlabel("speed (fps)")
    ax.set_ylabel("precision")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    label: str
    auc: float
    sampled_auc: float
    precision: float
    mean_iou: float
    exit_fractions: tuple[float, ...]
    mean_flops: float
    per_level_iou: dict[int, float]
    frames: int

    def __post_init__(self):
        if not 0.0 <= self.auc <= 100.0:
            raise ValueError(f"AUC {self.auc} outside [0, 100]")

    def as_row(self) -> dict:
        row = {"label": self.label, "auc": self.auc, "sampled_auc": self.sampled_auc,
               "precision": self.precision, "mean_iou": self.mean_iou, "mean_flops": self.mean_flops,
               "frames": self.frames}
        for k, f in enumerate(self.exit_fractions, start=1):
            row[f"frac_e{k}"] = f
        for lvl, v in sorted(self.per_level_iou.items()):
            row[f"iou_l{lvl}"] = v
        return row


def metric_report(results: Sequence[TrackResult], num_exits: int, label: str = "",
                  threshold: float = PRECISION_PX) -> MetricReport:
    ious = pooled(results, "ious")
    exits = pooled(results, "exits")
    levels: dict[int, list] = {}
    for r in results:
        levels.setdefault(r.difficulty, []).append(r.ious)
    return MetricReport(
        label, success_auc(ious), sampled_auc(ious), precision_at(pooled(results, "center_errors"), threshold),
        float(ious.mean()), tuple(float(v) for v in np.bincount(exits - 1, minlength=num_exits) / len(exits)),
        float(pooled(results, "flops").mean()),
        {lvl: float(np.concatenate(v).mean()) for lvl, v in sorted(levels.items())}, len(ious))


def write_rows(rows: Sequence[dict], path: str | Path) -> None:
    if not rows:
        raise ValueError("nothing to write")
    cols: list[str] = []
    for r in rows:
        cols += [c for c in r if c not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


@dataclass
class ExitDepthReport:
    rows: list[dict]  # exit, frames, mean_iou
    attribute_rows: list[dict]  # attribute, frames, mean_exit
    sign_positive: int
    sign_total: int
    p_value: float

    @property
    def non_increasing(self) -> bool:
        means = [r["mean_iou"] for r in self.rows]
        return all(a >= b for a, b in zip(means, means[1:]))


def exit_depth_report(results: Sequence[TrackResult]) -> ExitDepthReport:
    """Mean IoU grouped by realized exit, mean exit per attribute, and a sign test.

    The sign test pairs, within each sequence, the mean IoU of frames at its
    earliest realized exit with that at its latest; the one-sided alternative
    is that earlier exits are more accurate.
    """
    exits = pooled(results, "exits")
    ious = pooled(results, "ious")
    rows = [{"exit": int(k), "frames": int((exits == k).sum()), "mean_iou": float(ious[exits == k].mean())}
            for k in np.unique(exits)]
    attrs: dict[str, list[np.ndarray]] = {}
    for r in results:
        for a in sorted(r.attributes) or ["none"]:
            attrs.setdefault(a, []).append(r.exits)
    attribute_rows = [{"attribute": a, "frames": int(sum(len(e) for e in v)),
                       "mean_exit": float(np.concatenate(v).mean())} for a, v in sorted(attrs.items())]
    pos = tot = 0
    for r in results:
        present = np.unique(r.exits)
        if len(present) < 2:
            continue
        lo, hi = r.ious[r.exits == present[0]].mean(), r.ious[r.exits == present[-1]].mean()
        if lo == hi:
            continue
        tot += 1
        pos += int(lo > hi)
    p = float(stats.binomtest(pos, tot, 0.5, alternative="greater").pvalue) if tot else 1.0
    return ExitDepthReport(rows, attribute_rows, pos, tot, p)


def difficulty_report(results_by_exit: dict[int, Sequence[TrackResult]], levels: Iterable[int] = range(5)) -> list[dict]:
    """Mean IoU per (fixed exit, level) with the gain of each deeper exit over exit 1."""
    exits = sorted(results_by_exit)
    rows = []
    for lvl in levels:
        cells = {}
        frames = None
        for k in exits:
            sel = [r for r in results_by_exit[k] if r.difficulty == lvl]
            if sel:
                cells[k] = float(np.concatenate([r.ious for r in sel]).mean())
                frames = sum(len(r) for r in sel)
        if not cells:
            log.warning("difficulty level %d has no sequences; row omitted", lvl)
            continue
        row: dict = {"level": lvl, "frames": frames}
        for k in exits:
            row[f"iou_e{k}"] = cells[k]
        for k in exits[1:]:
            row[f"gain_e{k}"] = cells[k] - cells[exits[0]]
        rows.append(row)
    return rows
