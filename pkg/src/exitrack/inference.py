"""Exit policies, the per-frame tracking loop and threshold calibration.

The tracker advances all sequences of a batch in lock step, one frame at a
time. Inside a frame each row walks the exits in order and leaves the batch
as soon as its policy says so, so deeper layers only run for the rows still
undecided. With a single sequence this is the usual batch-1 tracker and
per-frame wall-clock is measured.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .backbone import EncoderRun, TokenSequence
from .boxes import iou_xywh
from .data import Sequence as TrackSequence, crop_image, search_window, template_crop
from .exits import corners_to_box
from .model import EarlyExitTracker
from .numerics.random import make_rng

WARMUP_FRAMES = 20
MIN_BOX_PX = 1.0
CSV_COLUMNS = ("frame", "x", "y", "w", "h", "exit", "score", "ms")


@dataclass(frozen=True)
class ExitPolicy:
    """``adaptive`` (thresholds), ``fixed`` (always exit ``k``) or ``random`` (exit drawn from ``probs``)."""

    kind: str
    num_exits: int
    tau: tuple[float, ...] = ()
    k: int = 0
    probs: tuple[float, ...] = ()
    seed: int = 0

    def __post_init__(self):
        K = self.num_exits
        if K < 1:
            raise ValueError("need at least one exit")
        if self.kind == "adaptive":
            if len(self.tau) != K - 1:
                raise ValueError(f"adaptive policy needs {K - 1} thresholds, got {len(self.tau)}")
        elif self.kind == "fixed":
            if not 1 <= self.k <= K:
                raise ValueError(f"fixed exit {self.k} outside 1..{K}")
        elif self.kind == "random":
            p = np.asarray(self.probs, dtype=float)
            if p.shape != (K,) or (p < 0).any() or not np.isclose(p.sum(), 1.0):
                raise ValueError(f"random policy needs {K} probabilities summing to 1, got {self.probs}")
        else:
            raise ValueError(f"unknown policy kind {self.kind!r}")

    @classmethod
    def adaptive(cls, tau: Sequence[float]) -> "ExitPolicy":
        return cls("adaptive", len(tau) + 1, tau=tuple(float(t) for t in tau))

    @classmethod
    def fixed(cls, k: int, num_exits: int) -> "ExitPolicy":
        return cls("fixed", num_exits, k=k)

    @classmethod
    def random(cls, probs: Sequence[float], seed: int = 0) -> "ExitPolicy":
        return cls("random", len(probs), probs=tuple(float(p) for p in probs), seed=seed)

    @classmethod
    def parse(cls, text: str, num_exits: int, tau: Sequence[float] | None = None,
              probs: Sequence[float] | None = None, seed: int = 0) -> "ExitPolicy":
        """``fixed:k``, ``adaptive`` (needs ``tau``) or ``random`` (needs ``probs``)."""
        if text.startswith("fixed:"):
            return cls.fixed(int(text.split(":", 1)[1]), num_exits)
        if text == "adaptive":
            if tau is None:
                raise ValueError("adaptive policy needs thresholds")
            if len(tau) != num_exits - 1:
                raise ValueError(f"adaptive policy needs {num_exits - 1} thresholds, got {len(tau)}")
            return cls.adaptive(tau)
        if text == "random":
            if probs is None:
                raise ValueError("random policy needs an exit distribution")
            if len(probs) != num_exits:
                raise ValueError(f"random policy needs {num_exits} probabilities, got {len(probs)}")
            return cls.random(probs, seed)
        raise ValueError(f"unknown policy {text!r} (use fixed:k, adaptive or random)")

    def label(self) -> str:
        if self.kind == "fixed":
            return f"fixed:{self.k}"
        if self.kind == "adaptive":
            return "adaptive:" + ",".join(f"{t:g}" for t in self.tau)
        return "random:" + ",".join(f"{p:.4f}" for p in self.probs)


def select_exit(k: int, score: float, tau: Sequence[float]) -> bool:
    """Whether exit ``k`` (1-based) terminates: strictly above its threshold, the last exit always."""
    if k > len(tau):
        return True
    return score > tau[k - 1]


def exit_from_scores(scores: Sequence[float], tau: Sequence[float]) -> int:
    """Realized exit given every exit's score."""
    for k, s in enumerate(scores, start=1):
        if select_exit(k, s, tau):
            return k
    return len(scores)


# ---------------------------------------------------------------------------
# tracking
# ---------------------------------------------------------------------------

@dataclass
class TrackResult:
    """Per-frame records for frames ``1..T-1``; frame 0 initializes the template."""

    name: str
    difficulty: int
    attributes: frozenset[str]
    boxes: np.ndarray  # [T-1, 4] xywh in frame pixels
    exits: np.ndarray  # [T-1] realized exit (1-based)
    scores: np.ndarray  # [T-1] score of the realized exit
    flops: np.ndarray  # [T-1]
    ms: np.ndarray  # [T-1], NaN when not measured
    flags: np.ndarray  # [T-1] bool, previous box was degenerate
    ious: np.ndarray | None = None
    center_errors: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.exits)

    @property
    def median_latency_ms(self) -> float:
        ms = self.ms[WARMUP_FRAMES:] if len(self.ms) > WARMUP_FRAMES else self.ms
        return float(np.median(ms))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for i in range(len(self)):
                x, y, bw, bh = (repr(float(v)) for v in self.boxes[i])
                w.writerow([i + 1, x, y, bw, bh, int(self.exits[i]), repr(float(self.scores[i])),
                            repr(float(self.ms[i]))])


def _is_degenerate(box: np.ndarray) -> bool:
    return not np.all(np.isfinite(box)) or box[2] < MIN_BOX_PX or box[3] < MIN_BOX_PX


def _clip_to_frame(box: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    H, W = size
    x1, y1 = np.clip(box[0], 0, W), np.clip(box[1], 0, H)
    x2, y2 = np.clip(box[0] + box[2], 0, W), np.clip(box[1] + box[3], 0, H)
    return np.array([x1, y1, x2 - x1, y2 - y1])


def _run_rows(model: EarlyExitTracker, z_tokens: nx.Tensor, search: np.ndarray, policy: ExitPolicy,
              forced: np.ndarray | None) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One frame for a batch of rows: exit, score, corners and FLOPs per row."""
    B = search.shape[0]
    K = model.num_exits
    exits = np.zeros(B, dtype=np.int64)
    scores = np.zeros(B, dtype=np.float64)
    corners = np.zeros((B, 4), dtype=np.float64)
    active = np.arange(B)
    run = model.start(z_tokens, nx.Tensor(search))
    prev = None
    for k in range(1, K + 1):
        out = model.run_exit(run, k, prev, with_box=False)
        s = out.scores
        if policy.kind == "adaptive":
            done = np.array([select_exit(k, float(v), policy.tau) for v in s], dtype=bool)
        elif policy.kind == "fixed":
            done = np.full(len(active), k == policy.k)
        else:
            done = forced[active] == k
        if done.any():
            idx = np.flatnonzero(done)
            feats = model.branches[k - 1].norm(out.adapter_features[idx])
            box = model.branches[k - 1].box(feats, model.n_x)[0].data
            rows = active[idx]
            exits[rows] = k
            scores[rows] = s[idx]
            corners[rows] = box
        if done.all():
            break
        keep = np.flatnonzero(~done)
        active = active[keep]
        if len(keep) < len(done):
            st = run.state
            run = EncoderRun(model.backbone, TokenSequence(st.tokens[keep], st.n_z, st.n_x, st.layer))
            out.adapter_features = out.adapter_features[keep]
        prev = out
    flops = np.array([model.path_flops(int(k)) for k in exits], dtype=np.int64)
    return exits, scores, corners, flops


def track_batch(model: EarlyExitTracker, seqs: Sequence[TrackSequence], policy: ExitPolicy,
                timed: bool = False) -> list[TrackResult]:
    """Track several sequences in lock step. ``timed`` requires a single sequence."""
    if not seqs:
        raise ValueError("no sequences to track")
    if timed and len(seqs) != 1:
        raise ValueError("latency is only measured with one sequence at a time")
    if policy.num_exits != model.num_exits:
        raise ValueError(f"policy is for {policy.num_exits} exits, model has {model.num_exits}")
    b = model.cfg.backbone
    n = len(seqs)
    lengths = [len(s) for s in seqs]
    with nx.no_grad():
        z = nx.Tensor(np.stack([template_crop(s.frames[0], b.template_size) for s in seqs]))
        z_tokens = model.embed_template(z)
        last_valid = [np.asarray(s.frames[0].gt_box, dtype=np.float64) for s in seqs]
        rngs = [make_rng(policy.seed, "random-exit", s.name) for s in seqs]
        recs = [dict(boxes=[], exits=[], scores=[], flops=[], ms=[], flags=[]) for _ in seqs]
        prev_degenerate = [False] * n
        for t in range(1, max(lengths)):
            rows = np.array([i for i in range(n) if t < lengths[i]])
            t0 = time.perf_counter()
            geoms = [search_window(last_valid[i]) for i in rows]
            search = np.stack([crop_image(seqs[i].frames[t].image, g, b.search_size) for i, g in zip(rows, geoms)])
            forced = None
            if policy.kind == "random":
                forced = np.array([int(rngs[i].choice(policy.num_exits, p=policy.probs)) + 1 for i in rows])
            zt = z_tokens if len(rows) == n else z_tokens[rows]
            exits, scores, corners, flops = _run_rows(model, zt, search, policy, forced)
            boxes = [_clip_to_frame(g.to_frame(corners_to_box(c)), seqs[i].frames[t].image.shape[:2])
                     for i, g, c in zip(rows, geoms, corners)]
            elapsed = (time.perf_counter() - t0) * 1e3 if timed else float("nan")
            for j, i in enumerate(rows):
                r = recs[i]
                r["boxes"].append(boxes[j])
                r["exits"].append(exits[j])
                r["scores"].append(scores[j])
                r["flops"].append(flops[j])
                r["ms"].append(elapsed)
                r["flags"].append(prev_degenerate[i])
                prev_degenerate[i] = _is_degenerate(boxes[j])
                if not prev_degenerate[i]:
                    last_valid[i] = boxes[j]
    results = []
    for s, r in zip(seqs, recs):
        boxes = np.array(r["boxes"], dtype=np.float64).reshape(-1, 4)
        gt = s.boxes[1:]
        res = TrackResult(s.name, s.difficulty, s.attributes, boxes, np.array(r["exits"], dtype=np.int64),
                          np.array(r["scores"]), np.array(r["flops"], dtype=np.int64), np.array(r["ms"]),
                          np.array(r["flags"], dtype=bool))
        res.ious = iou_xywh(boxes, gt)
        res.center_errors = np.hypot(boxes[:, 0] + boxes[:, 2] / 2 - gt[:, 0] - gt[:, 2] / 2,
                                     boxes[:, 1] + boxes[:, 3] / 2 - gt[:, 1] - gt[:, 3] / 2)
        results.append(res)
    return results


def track_sequence(model: EarlyExitTracker, seq: TrackSequence, policy: ExitPolicy,
                   timed: bool = True) -> TrackResult:
    """Batch-1 tracking of one sequence, with per-frame wall-clock when ``timed``."""
    return track_batch(model, [seq], policy, timed=timed)[0]


def track_all(model: EarlyExitTracker, seqs: Sequence[TrackSequence], policy: ExitPolicy,
              chunk: int = 16) -> list[TrackResult]:
    """Untimed tracking of a whole split in lock-step chunks."""
    out: list[TrackResult] = []
    for i in range(0, len(seqs), chunk):
        out += track_batch(model, seqs[i:i + chunk], policy)
    return out


# ---------------------------------------------------------------------------
# summaries, calibration, compute-matched random exiting
# ---------------------------------------------------------------------------

def pooled(results: Sequence[TrackResult], attr: str) -> np.ndarray:
    return np.concatenate([getattr(r, attr) for r in results])


def mean_iou(results: Sequence[TrackResult]) -> float:
    return float(pooled(results, "ious").mean())


def mean_flops(results: Sequence[TrackResult]) -> float:
    return float(pooled(results, "flops").mean())


def exit_distribution(results: Sequence[TrackResult], num_exits: int) -> np.ndarray:
    exits = pooled(results, "exits")
    return np.bincount(exits - 1, minlength=num_exits)[:num_exits] / len(exits)


def match_cost_random_policy(results: Sequence[TrackResult], num_exits: int, seed: int = 0) -> ExitPolicy:
    """Random exiting with the same exit-index distribution as an adaptive run."""
    return ExitPolicy.random(exit_distribution(results, num_exits), seed)


@dataclass
class CalibrationRow:
    tau: tuple[float, ...]
    mean_flops: float
    mean_iou: float
    exit_fractions: tuple[float, ...]
    source: str = "scalar"

    def as_dict(self) -> dict:
        d = {"tau": ",".join(f"{t:g}" for t in self.tau), "mean_flops": self.mean_flops,
             "mean_iou": self.mean_iou, "source": self.source}
        for k, f in enumerate(self.exit_fractions, start=1):
            d[f"frac_e{k}"] = f
        return d


@dataclass
class Calibration:
    rows: list[CalibrationRow]
    budget_flops: float
    best: CalibrationRow
    fixed_flops: tuple[float, ...] = field(default_factory=tuple)


def tau_grid(step: float = 0.05) -> list[float]:
    n = int(round(1.0 / step))
    return [round(i * step, 10) for i in range(n + 1)]


def calibrate(model: EarlyExitTracker, val_seqs: Sequence[TrackSequence], step: float = 0.05,
              refine_step: float = 0.05, refine_radius: int = 2, budget: float = 0.5) -> Calibration:
    """Sweep shared thresholds, refine each slot around the best one, and pick an operating point.

    Rows are sorted by mean FLOPs (cheapest first), a deterministic stand-in
    for latency. The chosen operating point has the highest validation IoU
    among rows costing at most ``F1 + budget * (FK - F1)``, with ``F1`` and
    ``FK`` the first- and last-exit path costs.
    """
    if not val_seqs:
        raise ValueError("calibration needs a non-empty validation set")
    K = model.num_exits
    if K < 2:
        raise ValueError("calibration needs at least two exits")
    f1, fk = model.path_flops(1), model.path_flops(K)
    limit = f1 + budget * (fk - f1)
    seen: dict[tuple[float, ...], CalibrationRow] = {}

    def evaluate(tau: tuple[float, ...], source: str) -> CalibrationRow:
        if tau not in seen:
            res = track_all(model, val_seqs, ExitPolicy.adaptive(tau))
            seen[tau] = CalibrationRow(tau, mean_flops(res), mean_iou(res),
                                       tuple(float(v) for v in exit_distribution(res, K)), source)
        return seen[tau]

    def pick(rows):
        ok = [r for r in rows if r.mean_flops <= limit] or [min(rows, key=lambda r: r.mean_flops)]
        return max(ok, key=lambda r: (r.mean_iou, -r.mean_flops))

    scalar = [evaluate((t,) * (K - 1), "scalar") for t in tau_grid(step)]
    best_scalar = pick(scalar)
    for slot in range(K - 1):
        for r in range(-refine_radius, refine_radius + 1):
            if r == 0:
                continue
            tau = list(best_scalar.tau)
            tau[slot] = round(min(1.0, max(0.0, tau[slot] + r * refine_step)), 10)
            evaluate(tuple(tau), "refine")
    rows = sorted(seen.values(), key=lambda r: (r.mean_flops, r.tau))
    return Calibration(rows, limit, pick(rows), (float(f1), float(fk)))


def write_calibration(cal: Calibration, path: str | Path) -> None:
    dicts = [r.as_dict() for r in cal.rows]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(dicts[0]) + ["chosen"])
        w.writeheader()
        for r, d in zip(cal.rows, dicts):
            w.writerow({**d, "chosen": int(r is cal.best)})
