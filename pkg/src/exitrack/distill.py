"""Target-aware self-distillation: imitation attention and cosine imitation loss.

Student features are the normalized search tokens of an early exit; the
teacher is the same slice of the final exit, detached from the graph. The
modules here are only built for training and are never consulted at
inference.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics.nn import Module, parameter
from .numerics.tensor import Tensor

COS_EPS = 1e-8


class ImitationAttention(Module):
    """Teacher-derived spatial map ``[B, N, 1]`` and channel vector ``[B, 1, D]``.

    Spatial: the teacher grid goes through a 1x1 convolution to one weight per
    location. Channel: a linear projection of the teacher, softmax-normalized
    over locations per channel, then pooled by that softmax into one weight
    per channel. Both transforms start at the identity re-weighting (weights
    near zero, bias one).
    """

    def __init__(self, dim: int, grid: int, rng: np.random.Generator):
        self.grid = grid
        self.spatial_w = parameter(rng.standard_normal((1, 1, dim, 1)) * 1e-3)
        self.spatial_b = parameter(np.ones(1))
        self.channel_w = parameter(rng.standard_normal((dim, dim)) * 1e-3)
        self.channel_b = parameter(np.ones(dim))

    def attention(self, teacher: Tensor) -> tuple[Tensor, Tensor]:
        B, N, D = teacher.shape
        G = self.grid
        if G * G != N:
            raise nx.ShapeError(f"imitation attention expects {G * G} tokens, got {N}")
        spatial = nx.conv2d(teacher.reshape(B, G, G, D), self.spatial_w, self.spatial_b).reshape(B, N, 1)
        proj = nx.linear(teacher, self.channel_w, self.channel_b)
        weights = nx.softmax(proj, axis=1)
        channel = (weights * proj).sum(axis=1, keepdims=True)
        return spatial, channel

    def __call__(self, teacher: Tensor, student: Tensor) -> Tensor:
        if teacher.shape != student.shape:
            raise nx.ShapeError(f"teacher {teacher.shape} and student {student.shape} differ")
        att_s, att_c = self.attention(teacher)
        return reweight(student, att_s, att_c)


def reweight(student: Tensor, att_s: Tensor, att_c: Tensor) -> Tensor:
    shape = student.shape
    return student * nx.broadcast_to(att_s, shape) * nx.broadcast_to(att_c, shape)


def cosine_imitation(student: Tensor, teacher: Tensor) -> Tensor:
    """``1 - cos`` between per-sample features flattened row-major over (token, channel).

    Batched inputs ``[B, ...]`` give the mean over samples. Norms are guarded
    by ``COS_EPS`` so an all-zero input yields 1 rather than NaN.
    """
    if student.shape != teacher.shape:
        raise nx.ShapeError(f"cosine_imitation: {student.shape} vs {teacher.shape}")
    B = student.shape[0] if student.ndim > 1 else 1
    s = student.reshape(B, -1)
    t = teacher.reshape(B, -1)
    dot = (s * t).sum(axis=1)
    ns = nx.sqrt((s * s).sum(axis=1) + COS_EPS ** 2)
    nt = nx.sqrt((t * t).sum(axis=1) + COS_EPS ** 2)
    return (1.0 - dot / (ns * nt)).mean()


def imitation_loss(students: Sequence[Tensor], teacher: Tensor) -> Tensor:
    """Mean cosine imitation over the hidden branches; zero when there are none."""
    if not students:
        return nx.Tensor(np.zeros((), dtype=teacher.dtype))
    total = cosine_imitation(students[0], teacher)
    for s in students[1:]:
        total = total + cosine_imitation(s, teacher)
    return total * (1.0 / len(students))
