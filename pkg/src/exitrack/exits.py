"""Exit branches: feature composition, adapter, IoU-score head and corner box head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .backbone import Block, layer_flops
from .boxes import BoundingBox
from .config import ConfigError
from .numerics.nn import Conv2d, LayerNorm, Linear, MLP, Module
from .numerics.tensor import Tensor


def comp(h_k: Tensor, h_prev: Tensor | None, mode: str, gate: Linear | None = None) -> Tensor:
    """Compose the tapped state with the previous branch's recycled features.

    Returns the adapter input. ``residual`` leaves it untouched (the recycled
    features are added after the adapter instead) and ``concat`` doubles the
    token count.
    """
    if h_prev is None or mode in ("none", "residual"):
        return h_k
    if mode == "concat":
        if h_prev.shape[0] != h_k.shape[0] or h_prev.shape[2] != h_k.shape[2]:
            raise nx.ShapeError(f"comp(concat): {h_k.shape} vs {h_prev.shape}")
        return nx.concat([h_k, h_prev], axis=1)
    if h_prev.shape != h_k.shape:
        raise nx.ShapeError(f"comp({mode}): {h_k.shape} vs {h_prev.shape}")
    if mode == "input_sum":
        return h_k + h_prev
    if mode == "gated_sum":
        if gate is None:
            raise ConfigError("gated_sum needs a gate")
        return h_k + nx.sigmoid(gate(h_prev)) * h_prev
    raise ConfigError(f"unknown reuse mode {mode!r}")


def grid_centers(grid: int) -> np.ndarray:
    """``[(grid*grid), 2]`` normalized (x, y) centres in row-major cell order."""
    c = (np.arange(grid) + 0.5) / grid
    ys, xs = np.meshgrid(c, c, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


class CornerHead(Module):
    """Two conv stacks scoring top-left and bottom-right corner locations."""

    def __init__(self, dim: int, channels: tuple[int, ...], grid: int, rng: np.random.Generator):
        self.grid = grid
        widths = [dim, *channels]
        self.tl = [Conv2d(a, b, 3, rng) for a, b in zip(widths[:-1], widths[1:])] + [Conv2d(widths[-1], 1, 1, rng)]
        self.br = [Conv2d(a, b, 3, rng) for a, b in zip(widths[:-1], widths[1:])] + [Conv2d(widths[-1], 1, 1, rng)]
        self._centers = grid_centers(grid)

    def _map(self, stack, x: Tensor) -> Tensor:
        for i, conv in enumerate(stack):
            x = conv(x)
            if i < len(stack) - 1:
                x = nx.relu(x)
        B = x.shape[0]
        return nx.softmax(x.reshape(B, self.grid * self.grid), axis=-1)

    def __call__(self, tokens: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """``tokens[B, G*G, D]`` -> corners ``[B, 4]`` (x1, y1, x2, y2) and both probability maps."""
        B, n, D = tokens.shape
        G = self.grid
        if G * G != n:
            raise nx.ShapeError(f"box head needs a square token grid, got {n} tokens")
        grid = tokens.reshape(B, G, G, D)
        p_tl = self._map(self.tl, grid)
        p_br = self._map(self.br, grid)
        centers = nx.Tensor(self._centers.astype(tokens.dtype))
        corners = nx.concat([nx.matmul(p_tl, centers), nx.matmul(p_br, centers)], axis=-1)
        return corners, p_tl, p_br

    def flops(self, dim: int, channels: tuple[int, ...]) -> int:
        widths = [dim, *channels]
        per = sum(9 * a * b for a, b in zip(widths[:-1], widths[1:])) + widths[-1]
        return 2 * self.grid * self.grid * (per + 2)


def corners_to_box(corners: np.ndarray) -> BoundingBox:
    x1, y1, x2, y2 = (float(v) for v in corners)
    return BoundingBox.from_corners(x1, y1, x2, y2).clamped()


@dataclass
class Decision:
    adapter_out: Tensor  # recycled into the next exit
    feats: Tensor  # normalized branch features fed to both heads
    score: Tensor  # [B] in [0, 1]


class ExitBranch(Module):
    """Decisioner (adapter + score head) and box head for exit ``index`` (1-based)."""

    def __init__(self, index: int, dim: int, heads: int, mlp_ratio: float, adapter_depth: int,
                 head_channels: tuple[int, ...], grid: int, reuse: str, rng: np.random.Generator):
        if reuse == "concat" and index > 1 and adapter_depth == 0:
            raise ConfigError(f"exit {index}: concat reuse needs at least one adapter layer")
        self.index = index
        self.reuse = reuse
        self.adapter = [Block(dim, heads, mlp_ratio, rng) for _ in range(adapter_depth)]
        self.norm = LayerNorm(dim)
        self.score_head = MLP([dim, dim, dim, 1], rng)
        self.proj = Linear(dim, dim, rng)
        self.box_head = CornerHead(dim, tuple(head_channels), grid, rng)
        self.gate = Linear(dim, dim, rng) if reuse == "gated_sum" and index > 1 else None
        self._dims = (dim, heads, mlp_ratio, tuple(head_channels))

    def decide(self, h_k: Tensor, h_prev: Tensor | None) -> Decision:
        n_tokens = h_k.shape[1]
        x = comp(h_k, h_prev, self.reuse, self.gate)
        for block in self.adapter:
            x = block(x)
        if x.shape[1] != n_tokens:
            x = x[:, :n_tokens]
        if self.reuse == "residual" and h_prev is not None:
            x = x + h_prev
        feats = self.norm(x)
        return Decision(x, feats, self.score(feats))

    def score(self, feats: Tensor) -> Tensor:
        """IoU estimate from the IoU-token slot only."""
        B = feats.shape[0]
        return nx.sigmoid(self.score_head(feats[:, 0])).reshape(B)

    def box(self, feats: Tensor, n_x: int) -> tuple[Tensor, Tensor, Tensor]:
        search = feats[:, feats.shape[1] - n_x:]
        return self.box_head(self.proj(search))

    # -- cost model -------------------------------------------------------
    def decision_flops(self, n_tokens: int, has_prev: bool) -> int:
        dim, heads, ratio, _ = self._dims
        adapter_tokens = 2 * n_tokens if (self.reuse == "concat" and has_prev) else n_tokens
        total = len(self.adapter) * layer_flops(adapter_tokens, dim, heads, ratio)
        total += 2 * dim * dim + dim
        if self.gate is not None and has_prev:
            total += n_tokens * dim * dim
        return total

    def box_flops(self, n_x: int) -> int:
        dim, _, _, channels = self._dims
        return n_x * dim * dim + self.box_head.flops(dim, channels)
