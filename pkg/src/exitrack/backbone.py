"""Joint template/search transformer encoder with an IoU token.

Token layout is fixed as ``[IoU | template | search]``. The encoder can be
advanced layer range by layer range so inference can stop at any exit and
resume later without recomputation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import BackboneConfig, ConfigError
from .numerics.nn import LayerNorm, Linear, Module, parameter, trunc_normal
from .numerics.tensor import Tensor


PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def weights(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Attention probabilities ``[B, H, N, N]`` and values ``[B, H, N, dh]``."""
        B, N, D = x.shape
        H = self.heads
        dh = D // H
        qkv = self.qkv(x).reshape(B, N, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = nx.softmax(nx.matmul(q, nx.swap_last(k)) * (1.0 / np.sqrt(dh)), axis=-1)
        return att, v

    def __call__(self, x: Tensor) -> Tensor:
        B, N, D = x.shape
        att, v = self.weights(x)
        out = nx.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, N, D)
        return self.proj(out)


class Block(Module):
    """Pre-norm transformer layer: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        hidden = int(dim * mlp_ratio)
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(nx.gelu(self.fc1(self.norm2(x))))


def layer_flops(n_tokens: int, dim: int, heads: int, mlp_ratio: float) -> int:
    """Multiply-adds of one encoder layer (norms, softmax and GELU excluded).

    qkv ``3ND^2`` + scores ``N^2 D`` + weighted values ``N^2 D`` + output
    projection ``ND^2`` + MLP ``2 r N D^2``. The head count only splits ``D``
    and does not change the total.
    """
    n, d = n_tokens, dim
    hidden = int(dim * mlp_ratio)
    return 3 * n * d * d + 2 * n * n * d + n * d * d + 2 * n * d * hidden


def patchify(image: Tensor, patch: int) -> Tensor:
    """``[B, H, W, C]`` -> ``[B, (H/P)(W/P), P*P*C]`` in row-major patch order."""
    B, H, W, C = image.shape
    if H % patch or W % patch:
        raise ConfigError(f"image {H}x{W} not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch
    x = image.reshape(B, gh, patch, gw, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, gh * gw, patch * patch * C)


@dataclass
class TokenSequence:
    """Encoder state: ``tokens[B, 1 + n_z + n_x, D]`` after ``layer`` layers."""

    tokens: Tensor
    n_z: int
    n_x: int
    layer: int = 0

    @classmethod
    def assemble(cls, *, iou: Tensor, template: Tensor, search: Tensor, n_z: int, n_x: int) -> "TokenSequence":
        if iou.shape[1] != 1 or template.shape[1] != n_z or search.shape[1] != n_x:
            raise ConfigError(
                f"token layout must be [IoU(1) | template({n_z}) | search({n_x})], "
                f"got [{iou.shape[1]} | {template.shape[1]} | {search.shape[1]}]")
        dims = {iou.shape[-1], template.shape[-1], search.shape[-1]}
        if len(dims) != 1:
            raise ConfigError(f"token dims differ: {sorted(dims)}")
        return cls(nx.concat([iou, template, search], axis=1), n_z, n_x, 0)

    @property
    def length(self) -> int:
        return 1 + self.n_z + self.n_x

    def iou_slot(self) -> Tensor:
        return self.tokens[:, 0:1]

    def template_slots(self) -> Tensor:
        return self.tokens[:, 1:1 + self.n_z]

    def search_slots(self) -> Tensor:
        return self.tokens[:, 1 + self.n_z:]


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        D, P = cfg.dim, cfg.patch
        self.n_z = (cfg.template_size // P) ** 2
        self.n_x = (cfg.search_size // P) ** 2
        self.patch_embed = Linear(P * P * 3, D, rng)
        self.iou_token = parameter(trunc_normal(rng, (1, D)))
        self.pos_iou = parameter(trunc_normal(rng, (1, D)))
        self.pos_z = parameter(trunc_normal(rng, (self.n_z, D)))
        self.pos_x = parameter(trunc_normal(rng, (self.n_x, D)))
        self.blocks = [Block(D, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]

    @property
    def exit_layers(self) -> tuple[int, ...]:
        return tuple(self.cfg.exit_layers)

    def embed_patches(self, image: Tensor) -> Tensor:
        """Centre and scale pixels in [0, 1] before the linear patch projection."""
        x = (image - PIXEL_MEAN) * (1.0 / PIXEL_STD)
        return self.patch_embed(patchify(x, self.cfg.patch))

    def assemble_input(self, z_tokens: Tensor, x_tokens: Tensor) -> TokenSequence:
        B = z_tokens.shape[0]
        D = self.cfg.dim
        iou = nx.broadcast_to(self.iou_token + self.pos_iou, (B, 1, D))
        return TokenSequence.assemble(iou=iou, template=z_tokens + self.pos_z, search=x_tokens + self.pos_x,
                                      n_z=self.n_z, n_x=self.n_x)

    def embed(self, template: Tensor, search: Tensor) -> TokenSequence:
        return self.assemble_input(self.embed_patches(template), self.embed_patches(search))

    def encode_until(self, seq: TokenSequence, from_layer: int, to_layer: int) -> TokenSequence:
        """Apply layers ``from_layer+1 .. to_layer`` to a state sitting at ``from_layer``."""
        if not 0 <= from_layer < to_layer <= self.cfg.depth:
            raise ValueError(f"bad layer range ({from_layer}, {to_layer}] for depth {self.cfg.depth}")
        if seq.layer != from_layer:
            raise ValueError(f"state is at layer {seq.layer}, not {from_layer}")
        x = seq.tokens
        for block in self.blocks[from_layer:to_layer]:
            x = block(x)
        return TokenSequence(x, seq.n_z, seq.n_x, to_layer)

    # -- cost model -------------------------------------------------------
    def embed_flops(self, include_template: bool = True) -> int:
        P, D = self.cfg.patch, self.cfg.dim
        n = self.n_x + (self.n_z if include_template else 0)
        return n * P * P * 3 * D

    def layer_flops(self) -> int:
        return layer_flops(1 + self.n_z + self.n_x, self.cfg.dim, self.cfg.heads, self.cfg.mlp_ratio)


class EncoderRun:
    """Resumable forward pass that records hidden states at exit layers."""

    def __init__(self, backbone: Backbone, seq: TokenSequence):
        self.backbone = backbone
        self.state = seq
        self.taps: dict[int, Tensor] = {}

    def advance_to(self, layer: int) -> TokenSequence:
        if layer > self.state.layer:
            self.state = self.backbone.encode_until(self.state, self.state.layer, layer)
        if layer in self.backbone.exit_layers:
            self.taps[layer] = self.state.tokens
        return self.state

    def tap(self, k: int) -> Tensor:
        """Hidden state ``h_k`` at exit ``k`` (1-based)."""
        layers = self.backbone.exit_layers
        if not 1 <= k <= len(layers):
            raise KeyError(f"exit {k} is not configured (exits at layers {layers})")
        layer = layers[k - 1]
        if layer not in self.taps:
            raise KeyError(f"exit {k} (layer {layer}) has not been reached yet")
        return self.taps[layer]
