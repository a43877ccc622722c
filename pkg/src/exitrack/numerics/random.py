"""Seeded generators.

All randomness flows through numpy's Philox (a counter-based generator), so a
given ``(seed, stream)`` pair yields the same draws on any machine.
"""
from __future__ import annotations

import numpy as np

Stream = int | str


def _stream_key(stream: Stream) -> int:
    if isinstance(stream, int):
        return stream
    # stable across processes, unlike hash()
    return int.from_bytes(stream.encode("utf-8")[:16].ljust(16, b"\0"), "little")


def make_rng(seed: int, *streams: Stream) -> np.random.Generator:
    """Generator for ``seed`` and an optional path of named sub-streams."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_stream_key(s) for s in streams]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))
