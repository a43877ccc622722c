"""The full early-exit tracker: encoder, exit branches and (training-only) imitation modules."""
from __future__ import annotations

from contextlib import nullcontext as _nullcontext
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .backbone import Backbone, EncoderRun, TokenSequence
from .boxes import BoundingBox
from .config import RunConfig
from .distill import ImitationAttention
from .exits import Decision, ExitBranch, corners_to_box
from .numerics.nn import Module
from .numerics.random import make_rng
from .numerics.tensor import Tensor

IMITATION_PREFIX = "imitation."


@dataclass
class ExitOutcome:
    """Result of evaluating one exit for a batch of frames (usually one)."""

    exit_index: int
    scores: np.ndarray  # [B]
    corners: np.ndarray | None  # [B, 4] normalized search coordinates, None if the box head was skipped
    adapter_features: Tensor  # recycled into exit_index + 1
    flops_so_far: int

    @property
    def score(self) -> float:
        return float(self.scores[0])

    @property
    def box(self) -> BoundingBox:
        if self.corners is None:
            raise ValueError(f"exit {self.exit_index} was evaluated without its box head")
        return corners_to_box(self.corners[0])

    def boxes(self) -> list[BoundingBox]:
        return [corners_to_box(c) for c in self.corners]


@dataclass
class BranchOutput:
    corners: Tensor  # [B, 4]
    score: Tensor  # [B]
    search_feats: Tensor  # [B, N_x, D] normalized search tokens (student/teacher features)


class EarlyExitTracker(Module):
    def __init__(self, cfg: RunConfig, seed: int = 0, imitation: bool | None = None):
        self.cfg = cfg
        b, e = cfg.backbone, cfg.exits
        self.backbone = Backbone(b, make_rng(seed, "init", "backbone"))
        grid = b.search_size // b.patch
        self.branches = [
            ExitBranch(k + 1, b.dim, b.heads, b.mlp_ratio, e.adapter_depths[k], tuple(e.head_channels), grid,
                       e.reuse, make_rng(seed, "init", "branch", k))
            for k in range(len(b.exit_layers))
        ]
        if imitation is None:
            imitation = cfg.train.distill == "on"
        self.imitation = [ImitationAttention(b.dim, grid, make_rng(seed, "init", "imitation", k))
                          for k in range(self.num_exits - 1)] if imitation else []

    @property
    def num_exits(self) -> int:
        return len(self.branches)

    @property
    def n_x(self) -> int:
        return self.backbone.n_x

    # -- training ---------------------------------------------------------
    def forward_train(self, template: Tensor, search: Tensor, exits: list[int] | None = None,
                      recycle: bool = True, freeze_backbone: bool = False) -> dict[int, BranchOutput]:
        """Run the listed exits (1-based; default all) recording gradients.

        With ``freeze_backbone`` the encoder runs off the tape so only branch
        parameters receive gradients.
        """
        exits = sorted(exits or range(1, self.num_exits + 1))
        with nx.no_grad() if freeze_backbone else _nullcontext():
            run = EncoderRun(self.backbone, self.backbone.embed(template, search))
        prev: Decision | None = None
        prev_k = 0
        out: dict[int, BranchOutput] = {}
        for k in exits:
            with nx.no_grad() if freeze_backbone else _nullcontext():
                run.advance_to(self.backbone.exit_layers[k - 1])
            h_prev = prev.adapter_out if (recycle and prev is not None and prev_k == k - 1) else None
            d = self.branches[k - 1].decide(run.tap(k), h_prev)
            corners, _, _ = self.branches[k - 1].box(d.feats, self.n_x)
            out[k] = BranchOutput(corners, d.score, d.feats[:, d.feats.shape[1] - self.n_x:])
            prev, prev_k = d, k
        return out

    # -- inference --------------------------------------------------------
    def start(self, z_tokens: Tensor, search: Tensor) -> EncoderRun:
        """Begin a resumable pass from cached template tokens and a search crop batch."""
        x_tokens = self.backbone.embed_patches(search)
        return EncoderRun(self.backbone, self.backbone.assemble_input(z_tokens, x_tokens))

    def embed_template(self, template: Tensor) -> Tensor:
        return self.backbone.embed_patches(template)

    def run_exit(self, run: EncoderRun, k: int, prev: ExitOutcome | None, with_box: bool = True) -> ExitOutcome:
        """Advance to exit ``k`` and evaluate its decisioner (and box head if asked)."""
        run.advance_to(self.backbone.exit_layers[k - 1])
        branch = self.branches[k - 1]
        h_prev = prev.adapter_features if (prev is not None and prev.exit_index == k - 1) else None
        d = branch.decide(run.tap(k), h_prev)
        corners = branch.box(d.feats, self.n_x)[0].data.copy() if with_box else None
        return ExitOutcome(k, d.score.data.copy(), corners, d.adapter_out,
                           self.path_flops(k, with_box=with_box))

    def path_flops(self, k: int, with_box: bool = True) -> int:
        """Multiply-adds to reach exit ``k`` with every earlier decisioner evaluated.

        Template tokens are embedded once per sequence and not counted.
        """
        bb = self.backbone
        n_tokens = 1 + bb.n_z + bb.n_x
        total = bb.embed_flops(include_template=False) + bb.exit_layers[k - 1] * bb.layer_flops()
        for j in range(1, k + 1):
            total += self.branches[j - 1].decision_flops(n_tokens, has_prev=j > 1)
        if with_box:
            total += self.branches[k - 1].box_flops(bb.n_x)
        return total

    # -- checkpoints ------------------------------------------------------
    def inference_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.state_dict().items() if not k.startswith(IMITATION_PREFIX)}

    def load_checkpoint_state(self, state: dict[str, np.ndarray]) -> None:
        if not self.imitation:
            state = {k: v for k, v in state.items() if not k.startswith(IMITATION_PREFIX)}
        self.load_state_dict(state, strict=True)


def to_tensor_batch(images: list[np.ndarray] | np.ndarray, dtype=np.float32) -> Tensor:
    return nx.Tensor(np.ascontiguousarray(np.asarray(images, dtype=dtype)))
