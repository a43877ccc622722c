"""End-to-end steps shared by the command line and the acceptance suite.

A trained model lives in a directory holding ``model.dytx`` (weights) and
``config.ini`` (the configuration it was built from). Training results can
be cached on disk under a key derived from the configuration, the seed and
a hash of the package sources, so a changed model never reuses stale
weights.
"""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import shlex
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import config as config_mod
from .config import RunConfig
from .data import Sequence as TrackSequence, generate_split, read_dataset
from .inference import ExitPolicy, TrackResult, track_batch
from .model import EarlyExitTracker
from .numerics import checkpoint
from .objectives import log_columns, train

log = logging.getLogger(__name__)

WEIGHTS = "model.dytx"
CONFIG = "config.ini"
MANIFEST = "manifest.json"
TRAIN_LOG = "train_log.csv"
TRAIN_TIME = "train_seconds.txt"
SPLITS = ("train", "val", "test")
EVAL_CHUNK = 16


# modules whose code determines trained weights
TRAINING_SOURCES = ("numerics/*.py", "config.py", "boxes.py", "data.py", "backbone.py", "exits.py",
                    "distill.py", "model.py", "objectives.py")


def source_hash(patterns: Sequence[str] = ("**/*.py",)) -> str:
    """SHA-256 over the package sources matching ``patterns`` (stable file order)."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    files = sorted({p for pat in patterns for p in root.glob(pat)})
    for p in files:
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def code_version() -> str:
    try:
        from importlib.metadata import version

        v = version("artifact")
    except Exception:  # not installed as a distribution
        v = "unknown"
    return f"{v}+{source_hash()[:12]}"


@dataclass
class RunManifest:
    command: str
    seed: int
    config: str
    code_version: str
    started: str
    finished: str = ""
    outputs: list[str] = field(default_factory=list)

    @classmethod
    def begin(cls, cfg: RunConfig, seed: int, argv: Sequence[str] | None = None) -> "RunManifest":
        argv = list(sys.argv if argv is None else argv)
        return cls(shlex.join(argv), seed, config_mod.dumps(cfg), code_version(), _now())

    def finish(self, out_dir: str | Path, outputs: Sequence[str | Path]) -> Path:
        self.finished = _now()
        self.outputs = sorted(str(Path(p)) for p in outputs)
        path = Path(out_dir) / MANIFEST
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# datasets and checkpoints
# ---------------------------------------------------------------------------

def generate_dataset(cfg: RunConfig, seed: int) -> dict[str, list[TrackSequence]]:
    return {split: generate_split(cfg.data, split, seed) for split in SPLITS}


def load_split(data_dir: str | Path, split: str) -> list[TrackSequence]:
    path = Path(data_dir) / split
    if not path.is_dir():
        raise FileNotFoundError(f"dataset split not found: {path}")
    seqs = read_dataset(path)
    if not seqs:
        raise FileNotFoundError(f"dataset split is empty: {path}")
    return seqs


def save_model(model: EarlyExitTracker, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / WEIGHTS, model.inference_state())
    config_mod.save(out / CONFIG, model.cfg)
    return [out / WEIGHTS, out / CONFIG]


def load_model(path: str | Path, seed: int = 0) -> EarlyExitTracker:
    """Load from a model directory or from its ``model.dytx`` file."""
    p = Path(path)
    d = p if p.is_dir() else p.parent
    weights = d / WEIGHTS if p.is_dir() else p
    if not weights.exists():
        raise FileNotFoundError(f"checkpoint not found: {weights}")
    cfg_path = d / CONFIG
    if not cfg_path.exists():
        raise FileNotFoundError(f"checkpoint config not found: {cfg_path}")
    model = EarlyExitTracker(config_mod.load(cfg_path), seed, imitation=False)
    model.load_checkpoint_state(checkpoint.load(weights))
    return model


def write_train_log(rows: Sequence[dict], num_exits: int, path: str | Path) -> None:
    cols = log_columns(num_exits)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in cols})


def cache_key(cfg: RunConfig, seed: int, data_seed: int) -> str:
    h = hashlib.sha256()
    h.update(config_mod.dumps(cfg).encode())
    h.update(f"seed={seed};data={data_seed};".encode())
    h.update(source_hash(TRAINING_SOURCES).encode())
    return h.hexdigest()[:20]


def trained_model(cfg: RunConfig, seed: int, data_seed: int, cache_dir: str | Path | None = None,
                  data: dict[str, list[TrackSequence]] | None = None) -> EarlyExitTracker:
    """Train (or reload a cached copy of) the model for ``(cfg, seed)`` on the generated dataset."""
    target = Path(cache_dir) / cache_key(cfg, seed, data_seed) if cache_dir else None
    if target is not None and (target / WEIGHTS).exists():
        log.info("reusing cached model %s", target)
        return load_model(target)
    if data is None:
        data = {s: generate_split(cfg.data, s, data_seed) for s in ("train", "val")}
    t0 = time.perf_counter()
    model, rows = train(data["train"], cfg, seed, data["val"])
    seconds = time.perf_counter() - t0
    if target is not None:
        save_model(model, target)
        write_train_log(rows, model.num_exits, target / TRAIN_LOG)
        (target / TRAIN_TIME).write_text(f"{seconds:.1f}\n")
    return load_model(target) if target is not None else model


def training_seconds(cfg: RunConfig, seed: int, data_seed: int, cache_dir: str | Path) -> float | None:
    """Wall-clock of the run that produced a cached model, if recorded."""
    path = Path(cache_dir) / cache_key(cfg, seed, data_seed) / TRAIN_TIME
    return float(path.read_text()) if path.exists() else None


# ---------------------------------------------------------------------------
# evaluation over many sequences
# ---------------------------------------------------------------------------

def _track_chunk(args) -> list[TrackResult]:
    model_dir, seqs, policy = args
    return track_batch(load_model(model_dir), seqs, policy)


def track_dataset(model: EarlyExitTracker, seqs: Sequence[TrackSequence], policy: ExitPolicy,
                  jobs: int = 1, model_dir: str | Path | None = None) -> list[TrackResult]:
    """Untimed tracking in fixed-size lock-step chunks.

    Chunk boundaries do not depend on ``jobs``, so results are identical for
    any worker count. Parallel runs reload weights from ``model_dir``.
    """
    chunks = [list(seqs[i:i + EVAL_CHUNK]) for i in range(0, len(seqs), EVAL_CHUNK)]
    if jobs > 1 and model_dir is not None and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(chunks), os.cpu_count() or 1)) as ex:
            parts = list(ex.map(_track_chunk, [(str(model_dir), c, policy) for c in chunks]))
    else:
        parts = [track_batch(model, c, policy) for c in chunks]
    return [r for part in parts for r in part]
