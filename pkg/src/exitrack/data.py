"""Synthetic tracking sequences, training crops and on-disk dataset layout.

Difficulty levels (``DIFFICULTY_TABLE``)::

    level  distractors  similarity  occlusion  motion  noise  deformation  clutter
      0        0           0.00       0.00      1.0    0.02     0.00        0.10
      1        1           0.50       0.05      1.5    0.04     0.05        0.20
      2        2           0.70       0.15      2.0    0.06     0.10        0.30
      3        3           0.85       0.25      2.5    0.08     0.15        0.40
      4        4           0.95       0.35      3.0    0.10     0.20        0.50

Dataset layout per split root::

    <root>/<seq-name>/img/00000001.png ...   8-bit RGB PNG, one per frame
    <root>/<seq-name>/groundtruth.txt        x,y,w,h per line, absolute pixels
    <root>/<seq-name>/meta.txt               key=value lines (difficulty, attributes)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .boxes import BoundingBox, iou_xywh
from .config import DataConfig
from .numerics.random import make_rng

ATTRIBUTES = ("occlusion", "distractor", "fast-motion", "deformation", "clutter")


class DataError(ValueError):
    """Bad generator config or malformed dataset files."""


@dataclass
class Frame:
    image: np.ndarray  # H x W x 3 uint8; pixels are image / 255
    gt_box: np.ndarray  # x, y, w, h in absolute pixels

    @property
    def pixels(self) -> np.ndarray:
        return self.image.astype(np.float32) / 255.0


@dataclass
class Sequence:
    name: str
    frames: list[Frame]
    difficulty: int = 0
    attributes: frozenset[str] = frozenset()

    def __post_init__(self):
        if len(self.frames) < 2:
            raise DataError(f"sequence {self.name!r} needs at least 2 frames")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def boxes(self) -> np.ndarray:
        return np.stack([f.gt_box for f in self.frames])


@dataclass
class SequenceConfig:
    length: int = 40
    frame_size: int = 128
    target_size: tuple[float, float] = (12.0, 22.0)
    aspect: tuple[float, float] = (0.6, 1.6)
    distractors: int = 0
    similarity: float = 0.0
    occlusion_prob: float = 0.0
    occlusion_fraction: float = 0.6
    motion: float = 1.0
    noise: float = 0.02
    deformation: float = 0.0
    clutter: float = 0.1
    difficulty: int = 0

    def attributes(self) -> frozenset[str]:
        tags = set()
        if self.occlusion_prob > 0:
            tags.add("occlusion")
        if self.distractors > 0:
            tags.add("distractor")
        if self.motion >= 2.5:
            tags.add("fast-motion")
        if self.deformation >= 0.1:
            tags.add("deformation")
        if self.clutter >= 0.3:
            tags.add("clutter")
        return frozenset(tags)


DIFFICULTY_TABLE: dict[int, dict] = {
    0: dict(distractors=0, similarity=0.0, occlusion_prob=0.0, motion=1.0, noise=0.02, deformation=0.0, clutter=0.1),
    1: dict(distractors=1, similarity=0.5, occlusion_prob=0.05, motion=1.5, noise=0.04, deformation=0.05, clutter=0.2),
    2: dict(distractors=2, similarity=0.7, occlusion_prob=0.15, motion=2.0, noise=0.06, deformation=0.1, clutter=0.3),
    3: dict(distractors=3, similarity=0.85, occlusion_prob=0.25, motion=2.5, noise=0.08, deformation=0.15, clutter=0.4),
    4: dict(distractors=4, similarity=0.95, occlusion_prob=0.35, motion=3.0, noise=0.10, deformation=0.2, clutter=0.5),
}


def level_config(level: int, data: DataConfig | None = None) -> SequenceConfig:
    if level not in DIFFICULTY_TABLE:
        raise DataError(f"difficulty level must be 0..4, got {level}")
    data = data or DataConfig()
    return SequenceConfig(length=data.seq_length, frame_size=data.frame_size,
                          target_size=(data.target_size_min, data.target_size_max),
                          difficulty=level, **DIFFICULTY_TABLE[level])


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass
class _Mover:
    pos: np.ndarray
    vel: np.ndarray
    size: float
    aspect: float
    phase: np.ndarray
    colors: np.ndarray  # body colour, band colour
    trail: list = field(default_factory=list)


def _random_color(rng) -> np.ndarray:
    # saturated colours so the target stands out at the easy levels
    c = rng.uniform(0.0, 1.0, 3)
    c[rng.integers(3)] = rng.uniform(0.8, 1.0)
    c[rng.integers(3)] = rng.uniform(0.0, 0.25)
    return c


def _box_of(m: _Mover, t: int, cfg: SequenceConfig) -> tuple[float, float, float, float]:
    scale = m.size * math.exp(0.1 * math.sin(m.phase[0] + 0.15 * t))
    aspect = m.aspect * math.exp(cfg.deformation * 2.0 * math.sin(m.phase[1] + 0.3 * t))
    w = scale * math.sqrt(aspect)
    h = scale / math.sqrt(aspect)
    return float(m.pos[0]), float(m.pos[1]), w, h


def _step(m: _Mover, cfg: SequenceConfig, rng, half: tuple[float, float]) -> None:
    m.vel = 0.85 * m.vel + rng.normal(0, 0.6 * cfg.motion, 2)
    speed = float(np.linalg.norm(m.vel))
    cap = 1.5 * cfg.motion
    if speed > cap:
        m.vel *= cap / speed
    m.pos = m.pos + m.vel
    for axis in range(2):
        lo, hi = half[axis] + 1.0, cfg.frame_size - half[axis] - 1.0
        if m.pos[axis] < lo:
            m.pos[axis] = 2 * lo - m.pos[axis]
            m.vel[axis] = abs(m.vel[axis])
        if m.pos[axis] > hi:
            m.pos[axis] = 2 * hi - m.pos[axis]
            m.vel[axis] = -abs(m.vel[axis])
        m.pos[axis] = min(max(m.pos[axis], lo), hi)


def _max_half(m: _Mover, cfg: SequenceConfig) -> tuple[float, float]:
    # worst-case half extents over the size/aspect oscillation
    s = m.size * math.exp(0.1)
    a_hi = m.aspect * math.exp(cfg.deformation * 2.0)
    a_lo = m.aspect * math.exp(-cfg.deformation * 2.0)
    return s * math.sqrt(a_hi) / 2, s / math.sqrt(a_lo) / 2


def _draw_object(img: np.ndarray, box, colors: np.ndarray) -> None:
    cx, cy, w, h = box
    H, W, _ = img.shape
    x0, x1 = max(int(cx - w / 2), 0), min(int(math.ceil(cx + w / 2)) + 1, W)
    y0, y1 = max(int(cy - h / 2), 0), min(int(math.ceil(cy + h / 2)) + 1, H)
    if x1 <= x0 or y1 <= y0:
        return
    ys = np.arange(y0, y1)[:, None] + 0.5
    xs = np.arange(x0, x1)[None, :] + 0.5
    inside = ((xs - cx) / (w / 2)) ** 2 + ((ys - cy) / (h / 2)) ** 2 <= 1.0
    band = inside & (np.abs(ys - cy) <= h / 6)
    patch = img[y0:y1, x0:x1]
    patch[inside] = colors[0]
    patch[band] = colors[1]


def _background(cfg: SequenceConfig, rng) -> np.ndarray:
    n = cfg.frame_size
    coarse = rng.uniform(0.2, 0.8, (6, 6, 3))
    bg = ndimage.zoom(coarse, (n / 6, n / 6, 1), order=1)[:n, :n]
    bg = 0.5 + (bg - 0.5) * 0.6
    for _ in range(int(round(cfg.clutter * 30))):
        w, h = rng.uniform(4, 20, 2)
        x, y = rng.uniform(0, n, 2)
        col = rng.uniform(0, 1, 3)
        x0, x1 = int(max(x - w / 2, 0)), int(min(x + w / 2, n))
        y0, y1 = int(max(y - h / 2, 0)), int(min(y + h / 2, n))
        bg[y0:y1, x0:x1] = (1 - cfg.clutter) * bg[y0:y1, x0:x1] + cfg.clutter * col
    return bg


def generate_sequence(cfg: SequenceConfig, rng: np.random.Generator, name: str = "seq") -> Sequence:
    """Render one sequence; the result depends only on ``cfg`` and the generator state."""
    n = cfg.frame_size
    if cfg.target_size[1] * 1.5 >= n or cfg.target_size[0] < 2:
        raise DataError(f"target size {cfg.target_size} impossible for {n}px frames")
    if cfg.length < 2:
        raise DataError("sequence length must be at least 2")
    bg = _background(cfg, rng)

    def spawn(colors, avoid=None):
        size = rng.uniform(*cfg.target_size)
        aspect = math.exp(rng.uniform(math.log(cfg.aspect[0]), math.log(cfg.aspect[1])))
        m = _Mover(np.zeros(2), rng.normal(0, cfg.motion, 2), size, aspect, rng.uniform(0, 2 * np.pi, 2), colors)
        half = _max_half(m, cfg)
        for _ in range(50):
            m.pos = np.array([rng.uniform(half[0] + 1, n - half[0] - 1), rng.uniform(half[1] + 1, n - half[1] - 1)])
            if avoid is None or np.linalg.norm(m.pos - avoid.pos) > 1.2 * (m.size + avoid.size):
                break
        return m

    target_colors = np.stack([_random_color(rng), _random_color(rng)])
    target = spawn(target_colors)
    distractors = []
    for _ in range(cfg.distractors):
        mix = np.stack([_random_color(rng), _random_color(rng)])
        colors = cfg.similarity * target_colors + (1 - cfg.similarity) * mix
        distractors.append(spawn(colors, avoid=target))

    # occlusion as a two-state chain whose stationary occupancy is occlusion_prob
    mean_dur = 5.0
    p = cfg.occlusion_prob
    start_prob = p / (mean_dur * (1 - p)) if p > 0 else 0.0
    occl_left = 0
    occl_side, occl_frac, occl_color = 0, 0.0, np.zeros(3)

    frames = []
    for t in range(cfg.length):
        if t > 0:
            _step(target, cfg, rng, _max_half(target, cfg))
            for d in distractors:
                _step(d, cfg, rng, _max_half(d, cfg))
        img = bg.copy()
        for d in distractors:
            _draw_object(img, _box_of(d, t, cfg), d.colors)
        box = _box_of(target, t, cfg)
        _draw_object(img, box, target.colors)
        cx, cy, w, h = box
        if t > 0 and occl_left == 0 and start_prob > 0 and rng.random() < start_prob:
            occl_left = int(rng.integers(3, 8))
            occl_side = int(rng.integers(4))
            occl_frac = rng.uniform(0.3, cfg.occlusion_fraction)
            occl_color = rng.uniform(0.3, 0.6, 3)
        if occl_left > 0:
            occl_left -= 1
            x0, y0, x1, y1 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
            if occl_side == 0:
                x1 = x0 + occl_frac * w
            elif occl_side == 1:
                x0 = x1 - occl_frac * w
            elif occl_side == 2:
                y1 = y0 + occl_frac * h
            else:
                y0 = y1 - occl_frac * h
            # the occluder overhangs the target on the three outer sides
            pad = 0.25 * min(w, h)
            ox0, oy0 = int(max(x0 - pad, 0)), int(max(y0 - pad, 0))
            ox1, oy1 = int(min(x1 + pad, n)), int(min(y1 + pad, n))
            if occl_side == 0:
                ox1 = int(min(x1, n))
            elif occl_side == 1:
                ox0 = int(max(x0, 0))
            elif occl_side == 2:
                oy1 = int(min(y1, n))
            else:
                oy0 = int(max(y0, 0))
            img[oy0:oy1, ox0:ox1] = occl_color
        if cfg.noise > 0:
            img = img + rng.normal(0, cfg.noise, img.shape)
        u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        gt = np.array([cx - w / 2, cy - h / 2, w, h])
        frames.append(Frame(u8, gt))
    return Sequence(name, frames, cfg.difficulty, cfg.attributes())


def generate_split(data: DataConfig, split: str, seed: int) -> list[Sequence]:
    per_level = {"train": data.train_per_level, "val": data.val_per_level, "test": data.test_per_level}
    if split not in per_level:
        raise DataError(f"unknown split {split!r}")
    if not 1 <= data.levels <= 5:
        raise DataError(f"level count must be 1..5, got {data.levels}")
    out = []
    for level in range(data.levels):
        cfg = level_config(level, data)
        for i in range(per_level[split]):
            rng = make_rng(seed, "data", split, level, i)
            out.append(generate_sequence(cfg, rng, name=f"L{level}-{split}-{i:03d}"))
    return out


# ---------------------------------------------------------------------------
# cropping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CropGeometry:
    """Square crop window in frame pixels: top-left corner and side length."""

    x0: float
    y0: float
    side: float

    def to_crop(self, xywh) -> BoundingBox:
        x, y, w, h = (float(v) for v in xywh)
        return BoundingBox((x + w / 2 - self.x0) / self.side, (y + h / 2 - self.y0) / self.side,
                           w / self.side, h / self.side)

    def to_frame(self, box: BoundingBox) -> np.ndarray:
        w, h = box.w * self.side, box.h * self.side
        cx, cy = self.x0 + box.cx * self.side, self.y0 + box.cy * self.side
        return np.array([cx - w / 2, cy - h / 2, w, h])


def crop_window(center: tuple[float, float], side: float) -> CropGeometry:
    return CropGeometry(center[0] - side / 2, center[1] - side / 2, side)


def crop_image(image: np.ndarray, geom: CropGeometry, out_size: int) -> np.ndarray:
    """Bilinear resample of ``geom`` to ``out_size``; outside pixels take the image mean."""
    img = image.astype(np.float32) / 255.0 if image.dtype == np.uint8 else image.astype(np.float32)
    H, W, _ = img.shape
    step = geom.side / out_size
    xs = geom.x0 + (np.arange(out_size) + 0.5) * step - 0.5
    ys = geom.y0 + (np.arange(out_size) + 0.5) * step - 0.5
    x_out = (xs < -0.5) | (xs > W - 0.5)
    y_out = (ys < -0.5) | (ys > H - 0.5)
    xs = np.clip(xs, 0, W - 1)
    ys = np.clip(ys, 0, H - 1)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (xs - x0)[None, :, None]
    wy = (ys - y0)[:, None, None]
    rows = img[y0] * (1 - wy) + img[y1] * wy
    out = rows[:, x0] * (1 - wx) + rows[:, x1] * wx
    if x_out.any() or y_out.any():
        out[y_out[:, None] | x_out[None, :]] = img.mean(axis=(0, 1))
    return out


def _side(xywh, factor: float) -> float:
    return factor * math.sqrt(max(float(xywh[2]) * float(xywh[3]), 1.0))


def template_crop(frame: Frame, size: int, factor: float = 2.0) -> np.ndarray:
    x, y, w, h = frame.gt_box
    return crop_image(frame.image, crop_window((x + w / 2, y + h / 2), _side(frame.gt_box, factor)), size)


def search_window(prev_xywh, factor: float = 4.0) -> CropGeometry:
    x, y, w, h = (float(v) for v in prev_xywh)
    return crop_window((x + w / 2, y + h / 2), _side(prev_xywh, factor))


@dataclass
class SamplePair:
    template: np.ndarray  # H_z x W_z x 3
    search: np.ndarray  # H_x x W_x x 3
    target_box: BoundingBox
    geometry: CropGeometry


def crop_pair(seq: Sequence, t_template: int, t_search: int, rng: np.random.Generator | None = None,
              template_size: int = 32, search_size: int = 64, center_jitter: float = 0.0,
              scale_jitter: float = 0.0) -> SamplePair:
    """Template crop (2x object side) and jittered search crop (4x object side)."""
    n = len(seq)
    if not (0 <= t_template < n and 0 <= t_search < n):
        raise IndexError(f"frame indices ({t_template}, {t_search}) out of range for {n} frames")
    template = template_crop(seq.frames[t_template], template_size)
    gt = seq.frames[t_search].gt_box
    x, y, w, h = (float(v) for v in gt)
    side = _side(gt, 4.0)
    cx, cy = x + w / 2, y + h / 2
    if rng is not None and (center_jitter > 0 or scale_jitter > 0):
        obj = math.sqrt(w * h)
        cx += rng.uniform(-center_jitter, center_jitter) * obj
        cy += rng.uniform(-center_jitter, center_jitter) * obj
        side *= math.exp(rng.uniform(-scale_jitter, scale_jitter))
    geom = crop_window((cx, cy), side)
    search = crop_image(seq.frames[t_search].image, geom, search_size)
    box = geom.to_crop(gt)
    x1, y1, x2, y2 = (float(np.clip(v, 0.0, 1.0)) for v in box.corners())
    target = BoundingBox.from_corners(x1, y1, x2, y2).clamped()
    return SamplePair(template, search, target, geom)


# ---------------------------------------------------------------------------
# reference tracker (difficulty calibration)
# ---------------------------------------------------------------------------

def reference_track(seq: Sequence, patch: int = 16) -> np.ndarray:
    """Fixed-size normalized-cross-correlation tracker; returns xywh per frame.

    Frame 0 gives the template. Each later frame is searched in a 4x window
    around the previous estimate; the box size never changes.
    """
    first = seq.frames[0]
    tmpl = crop_image(first.image, search_window(first.gt_box, 1.0), patch)
    t = tmpl - tmpl.mean()
    tnorm = np.linalg.norm(t)
    box = first.gt_box.astype(np.float64).copy()
    out = [box.copy()]
    size = 4 * patch
    for frame in seq.frames[1:]:
        geom = search_window(box, 4.0)
        region = crop_image(frame.image, geom, size)
        win = np.lib.stride_tricks.sliding_window_view(region, (patch, patch, 3))[:, :, 0]
        win = win - win.mean(axis=(2, 3, 4), keepdims=True)
        num = np.einsum("ijabc,abc->ij", win, t)
        den = np.sqrt(np.einsum("ijabc,ijabc->ij", win, win)) * tnorm + 1e-8
        score = num / den
        i, j = np.unravel_index(np.argmax(score), score.shape)
        scale = geom.side / size
        cx = geom.x0 + (j + patch / 2) * scale
        cy = geom.y0 + (i + patch / 2) * scale
        box = np.array([cx - box[2] / 2, cy - box[3] / 2, box[2], box[3]])
        out.append(box.copy())
    return np.stack(out)


def reference_iou(seq: Sequence) -> float:
    pred = reference_track(seq)
    return float(iou_xywh(pred[1:], seq.boxes[1:]).mean())


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_sequence(seq: Sequence, root: str | Path) -> Path:
    d = Path(root) / seq.name
    img_dir = d / "img"
    img_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames, start=1):
        Image.fromarray(frame.image).save(img_dir / f"{i:08d}.png", optimize=False)
    lines = [",".join(_fmt(v) for v in f.gt_box) for f in seq.frames]
    (d / "groundtruth.txt").write_text("\n".join(lines) + "\n")
    meta = [f"difficulty={seq.difficulty}", f"attributes={','.join(sorted(seq.attributes))}",
            f"length={len(seq)}"]
    (d / "meta.txt").write_text("\n".join(meta) + "\n")
    return d


def parse_groundtruth(text: str) -> np.ndarray:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.replace("\t", ",").split(",")
        if len(parts) != 4:
            raise DataError(f"groundtruth line {lineno}: expected 4 comma-separated values, got {line!r}")
        try:
            boxes.append([float(p) for p in parts])
        except ValueError as exc:
            raise DataError(f"groundtruth line {lineno}: non-numeric value in {line!r}") from exc
    return np.array(boxes, dtype=np.float64).reshape(-1, 4)


def _parse_meta(path: Path) -> dict[str, str]:
    if not path.is_file():
        return {}
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise DataError(f"{path} line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_sequence(path: str | Path) -> Sequence:
    d = Path(path)
    gt_file = d / "groundtruth.txt"
    if not gt_file.is_file():
        raise FileNotFoundError(f"missing groundtruth file: {gt_file}")
    boxes = parse_groundtruth(gt_file.read_text())
    images = sorted((d / "img").glob("*.png"))
    if len(images) != len(boxes):
        raise DataError(f"{d}: {len(images)} images but {len(boxes)} annotations")
    frames = [Frame(np.asarray(Image.open(p).convert("RGB")), b) for p, b in zip(images, boxes)]
    meta = _parse_meta(d / "meta.txt")
    attrs = frozenset(a for a in meta.get("attributes", "").split(",") if a)
    return Sequence(d.name, frames, int(meta.get("difficulty", 0)), attrs)


def read_dataset(root: str | Path) -> list[Sequence]:
    r = Path(root)
    if not r.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {r}")
    seqs = [read_sequence(p) for p in sorted(r.iterdir()) if (p / "groundtruth.txt").is_file()]
    if not seqs:
        raise DataError(f"no sequences under {r}")
    return seqs


def write_dataset(seqs: list[Sequence], root: str | Path) -> None:
    for s in seqs:
        write_sequence(s, root)


def with_name(seq: Sequence, name: str) -> Sequence:
    return replace(seq, name=name)
