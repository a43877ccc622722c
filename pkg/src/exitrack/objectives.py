"""Losses and the two-stage training procedure."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .boxes import BoundingBox, iou_corners
from .config import RunConfig
from .data import Sequence as TrackSequence, crop_pair
from .distill import imitation_loss
from .model import BranchOutput, EarlyExitTracker
from .numerics.optim import AdamW
from .numerics.random import make_rng
from .numerics.tensor import Tensor

log = logging.getLogger(__name__)

BOX_EPS = 1e-7


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossWeights:
    l1: float = 5.0
    giou: float = 2.0
    score: float = 5.0
    imit: float = 10.0

    def __post_init__(self):
        for name in ("l1", "giou", "score", "imit"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "LossWeights":
        t = cfg.train
        return cls(t.lambda_l1, t.lambda_giou, t.lambda_score, t.lambda_imit)


# ---------------------------------------------------------------------------
# box overlap
# ---------------------------------------------------------------------------

def iou(a: BoundingBox, b: BoundingBox) -> float:
    return float(iou_corners(a.corners(), b.corners()))


def _split(c: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    return c[..., 0], c[..., 1], c[..., 2], c[..., 3]


def giou_terms(pred: Tensor, gt: Tensor) -> tuple[Tensor, Tensor]:
    """Per-box IoU and GIoU for corner-form ``[..., 4]`` tensors."""
    px1, py1, px2, py2 = _split(pred)
    gx1, gy1, gx2, gy2 = _split(gt)
    area_p = nx.relu(px2 - px1) * nx.relu(py2 - py1)
    area_g = nx.relu(gx2 - gx1) * nx.relu(gy2 - gy1)
    iw = nx.relu(nx.minimum(px2, gx2) - nx.maximum(px1, gx1))
    ih = nx.relu(nx.minimum(py2, gy2) - nx.maximum(py1, gy1))
    inter = iw * ih
    union = area_p + area_g - inter
    iou_t = inter / (union + BOX_EPS)
    cw = nx.maximum(px2, gx2) - nx.minimum(px1, gx1)
    ch = nx.maximum(py2, gy2) - nx.minimum(py1, gy1)
    enclose = cw * ch
    giou = iou_t - (enclose - union) / (enclose + BOX_EPS)
    return iou_t, giou


def giou_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean of ``1 - GIoU`` over boxes (corner form)."""
    _, giou = giou_terms(pred, gt)
    return (1.0 - giou).mean()


def corners_to_cxcywh(c: Tensor) -> Tensor:
    x1, y1, x2, y2 = _split(c)
    return nx.stack([(x1 + x2) * 0.5, (y1 + y2) * 0.5, x2 - x1, y2 - y1], axis=-1)


def l1_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute error over (cx, cy, w, h) and boxes."""
    return nx.abs_(corners_to_cxcywh(pred) - corners_to_cxcywh(gt)).mean()


def locate_loss(pred: Tensor, gt: Tensor, w: LossWeights) -> Tensor:
    return l1_loss(pred, gt) * w.l1 + giou_loss(pred, gt) * w.giou


def score_target(pred: Tensor, gt: Tensor) -> np.ndarray:
    """IoU of the exit's own prediction; plain array so no gradient reaches the box."""
    return iou_corners(pred.data, gt.data).astype(pred.dtype)


def score_loss(score: Tensor, target) -> Tensor:
    target = nx.Tensor(np.asarray(target, dtype=score.dtype))
    return ((score - target) ** 2).mean()


@dataclass
class LossBreakdown:
    total: Tensor
    locate: dict[int, float] = field(default_factory=dict)
    score: dict[int, float] = field(default_factory=dict)
    imit: float = 0.0


def joint_loss(outputs: dict[int, BranchOutput], gt: Tensor, w: LossWeights,
               students: Sequence[Tensor] = (), teacher: Tensor | None = None) -> LossBreakdown:
    """Per-exit ``locate + λs·score`` averaged over the given exits, plus ``λm`` times imitation.

    ``students`` are (possibly re-weighted) early-exit features; ``teacher`` is
    detached here so no imitation gradient reaches the deepest branch.
    """
    if not outputs:
        raise ValueError("joint_loss needs at least one exit")
    bd = LossBreakdown(total=None)  # type: ignore[arg-type]
    total = None
    for k, out in sorted(outputs.items()):
        loc = locate_loss(out.corners, gt, w)
        sc = score_loss(out.score, score_target(out.corners, gt))
        bd.locate[k] = float(loc.data)
        bd.score[k] = float(sc.data)
        term = loc + sc * w.score
        total = term if total is None else total + term
    total = total * (1.0 / len(outputs))
    if students:
        if teacher is None:
            raise ValueError("students given without a teacher")
        im = imitation_loss(list(students), teacher.detach())
        bd.imit = float(im.data)
        total = total + im * w.imit
    bd.total = total
    return bd


def distill_students(model: EarlyExitTracker, outputs: dict[int, BranchOutput], mode: str,
                     exits: Sequence[int]) -> tuple[list[Tensor], Tensor | None]:
    """Students for the listed early exits and the (detached) final-exit teacher."""
    K = model.num_exits
    if mode == "off" or K not in outputs:
        return [], None
    teacher = outputs[K].search_feats.detach()
    students = []
    for k in sorted(exits):
        if k == K or k not in outputs:
            continue
        f = outputs[k].search_feats
        students.append(model.imitation[k - 1](teacher, f) if mode == "on" else f)
    return students, teacher


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    template: Tensor
    search: Tensor
    target: Tensor  # corners [B, 4]


def sample_pairs(seqs: Sequence[TrackSequence], n: int, rng: np.random.Generator, cfg: RunConfig,
                 jitter: bool = True) -> list:
    t, b = cfg.train, cfg.backbone
    pairs = []
    for _ in range(n):
        seq = seqs[int(rng.integers(len(seqs)))]
        L = len(seq)
        ts = int(rng.integers(1, L))
        tz = int(rng.integers(max(0, ts - t.max_frame_gap), ts))
        pairs.append(crop_pair(seq, tz, ts, rng, b.template_size, b.search_size,
                               t.center_jitter if jitter else 0.0, t.scale_jitter if jitter else 0.0))
    return pairs


def collate(pairs: list) -> Batch:
    return Batch(nx.Tensor(np.stack([p.template for p in pairs])),
                 nx.Tensor(np.stack([p.search for p in pairs])),
                 nx.Tensor(np.array([p.target_box.corners() for p in pairs], dtype=np.float32)))


def evaluate_pairs(model: EarlyExitTracker, pairs: list, batch_size: int = 64) -> dict[int, float]:
    """Mean IoU per exit on fixed crops (all exits, no early stopping)."""
    sums = {k: 0.0 for k in range(1, model.num_exits + 1)}
    with nx.no_grad():
        for i in range(0, len(pairs), batch_size):
            b = collate(pairs[i:i + batch_size])
            outs = model.forward_train(b.template, b.search)
            for k, o in outs.items():
                sums[k] += float(iou_corners(o.corners.data, b.target.data).sum())
    return {k: v / len(pairs) for k, v in sums.items()}


@dataclass
class Phase:
    """One optimisation phase: supervised exits, trainable branches, backbone on or off."""

    stage: int
    exits: list[int]
    branches: list[int]
    train_backbone: bool
    epochs: int
    recycle: bool = True


@dataclass
class TrainSchedule:
    phases: list[Phase]

    @classmethod
    def from_config(cls, cfg: RunConfig, num_exits: int) -> "TrainSchedule":
        t = cfg.train
        K = num_exits
        every = list(range(1, K + 1))
        phases = [Phase(1, [K], [K], True, t.epochs_stage1, recycle=False)]
        if t.epochs_stage2 == 0:
            return cls(phases)
        if t.strategy == "joint":
            phases.append(Phase(2, every, every, True, t.epochs_stage2))
        elif t.strategy == "fixed-backbone":
            phases.append(Phase(2, every, every, False, t.epochs_stage2))
        else:
            # frozen backbone, one branch at a time from early to deep
            per = max(1, t.epochs_stage2 // K)
            for k in every:
                phases.append(Phase(2, [k], [k], False, per))
        return cls(phases)

    @property
    def total_epochs(self) -> int:
        return sum(p.epochs for p in self.phases)


def _phase_params(model: EarlyExitTracker, phase: Phase, distill: str) -> tuple[list[Tensor], list[Tensor]]:
    backbone = model.backbone.parameters() if phase.train_backbone else []
    heads: list[Tensor] = []
    for k in phase.branches:
        heads += model.branches[k - 1].parameters()
        if distill == "on" and k < model.num_exits and model.imitation:
            heads += model.imitation[k - 1].parameters()
    return backbone, heads


def log_columns(num_exits: int) -> list[str]:
    ks = range(1, num_exits + 1)
    return (["epoch", "stage", "loss_total"] + [f"loss_locate_e{k}" for k in ks]
            + [f"loss_score_e{k}" for k in ks] + ["loss_imit"] + [f"val_iou_e{k}" for k in ks])


def train(train_seqs: Sequence[TrackSequence], cfg: RunConfig, seed: int,
          val_seqs: Sequence[TrackSequence] | None = None, val_pairs: int = 128,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[EarlyExitTracker, list[dict]]:
    """Two-stage training; returns the model and one log row per epoch."""
    if not train_seqs:
        raise ValueError("training set is empty")
    t = cfg.train
    model = EarlyExitTracker(cfg, seed)
    K = model.num_exits
    weights = LossWeights.from_config(cfg)
    schedule = TrainSchedule.from_config(cfg, K)
    val = sample_pairs(val_seqs, val_pairs, make_rng(seed, "val-pairs"), cfg) if val_seqs else []
    rows: list[dict] = []
    for pi, phase in enumerate(schedule.phases):
        bb_params, head_params = _phase_params(model, phase, t.distill)
        opt = AdamW([(bb_params, t.lr_backbone), (head_params, t.lr_head)], weight_decay=t.weight_decay)
        decay_epoch = int(math.floor(t.decay_at * phase.epochs))
        distill = t.distill if phase.stage == 2 else "off"
        # the teacher has to be computed even when only an early branch is trained
        run_exits = sorted(set(phase.exits) | ({K} if distill != "off" else set()))
        if phase.stage == 2 and not phase.train_backbone:
            run_exits = list(range(1, max(run_exits) + 1))
        for epoch in range(phase.epochs):
            if epoch == decay_epoch:
                opt.scale_lr(0.1)
            pairs = sample_pairs(train_seqs, t.pairs_per_epoch, make_rng(seed, "pairs", pi, epoch), cfg)
            sums: dict[str, float] = {}
            n_batches = 0
            for i in range(0, len(pairs), t.batch_size):
                batch = collate(pairs[i:i + t.batch_size])
                opt.zero_grad()
                outs = model.forward_train(batch.template, batch.search, run_exits, phase.recycle,
                                           freeze_backbone=not phase.train_backbone)
                students, teacher = distill_students(model, outs, distill, phase.exits)
                bd = joint_loss({k: outs[k] for k in phase.exits}, batch.target, weights, students, teacher)
                value = float(bd.total.data)
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at stage {phase.stage}, epoch {epoch}, batch {n_batches}: "
                        f"locate={bd.locate} score={bd.score} imit={bd.imit}")
                bd.total.backward()
                opt.step()
                n_batches += 1
                sums["total"] = sums.get("total", 0.0) + value
                sums["imit"] = sums.get("imit", 0.0) + bd.imit
                for k in phase.exits:
                    sums[f"loc{k}"] = sums.get(f"loc{k}", 0.0) + bd.locate[k]
                    sums[f"sc{k}"] = sums.get(f"sc{k}", 0.0) + bd.score[k]
            row: dict = {"epoch": len(rows) + 1, "stage": phase.stage, "loss_total": sums["total"] / n_batches}
            for k in range(1, K + 1):
                row[f"loss_locate_e{k}"] = sums.get(f"loc{k}", float("nan")) / n_batches
            for k in range(1, K + 1):
                row[f"loss_score_e{k}"] = sums.get(f"sc{k}", float("nan")) / n_batches
            row["loss_imit"] = sums["imit"] / n_batches
            vi = evaluate_pairs(model, val) if val else {}
            for k in range(1, K + 1):
                row[f"val_iou_e{k}"] = vi.get(k, float("nan"))
            rows.append(row)
            log.info("stage %d epoch %d loss %.4f val %s", phase.stage, row["epoch"], row["loss_total"],
                     " ".join(f"{vi[k]:.3f}" for k in sorted(vi)))
            if on_epoch is not None:
                on_epoch(row)
    model.zero_grad()
    return model, rows
