"""End-to-end acceptance checks, one test per criterion.

Trained models are cached under ``$EXITRACK_CACHE`` (default
``<repo>/.cache/acceptance``) keyed by configuration, seed and the sources
that influence training, so repeated runs only pay for evaluation.
Each test attaches a one-line summary that the terminal report prints.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from exitrack import numerics as nx
from exitrack.backbone import Attention, Backbone, layer_flops
from exitrack.config import BackboneConfig, RunConfig, replace
from exitrack.data import generate_split
from exitrack.distill import ImitationAttention, cosine_imitation
from exitrack.evaluation import TradeoffPoint, dominates, exit_depth_report, pareto_front
from exitrack.exits import CornerHead
from exitrack.inference import (ExitPolicy, calibrate, exit_from_scores, match_cost_random_policy, mean_flops,
                                mean_iou, pooled, select_exit, track_all, track_sequence)
from exitrack.model import EarlyExitTracker
from exitrack.numerics.gradcheck import check_gradients
from exitrack.numerics.nn import LayerNorm, MLP
from exitrack.numerics.random import make_rng
from exitrack.objectives import giou_loss, iou, score_loss
from exitrack.boxes import BoundingBox
from exitrack.pipeline import trained_model, training_seconds

SEEDS = (0, 1, 2)
DATA_SEED = 0
CACHE = Path(os.environ.get("EXITRACK_CACHE", Path(__file__).resolve().parents[1] / ".cache" / "acceptance"))

pytestmark = pytest.mark.acceptance


def verdict(record_property, ok: bool, detail: str) -> None:
    record_property("criterion", detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# shared trained models and evaluations
# ---------------------------------------------------------------------------

class Lab:
    """Lazily trains/evaluates the configurations the trend criteria need."""

    def __init__(self):
        self.base = RunConfig().validate()
        self.data = {s: generate_split(self.base.data, s, DATA_SEED) for s in ("train", "val", "test")}
        self._models = {}
        self._fixed = {}
        self._adaptive = {}

    def variant(self, **sections) -> RunConfig:
        return replace(self.base, **sections) if sections else self.base

    def model(self, seed: int, **sections) -> EarlyExitTracker:
        cfg = self.variant(**sections)
        key = (seed, repr(cfg))
        if key not in self._models:
            self._models[key] = trained_model(cfg, seed, DATA_SEED, CACHE, self.data)
        return self._models[key]

    def train_seconds(self, seed: int, **sections) -> float | None:
        return training_seconds(self.variant(**sections), seed, DATA_SEED, CACHE)

    def fixed(self, seed: int, k: int, split: str = "test", **sections):
        key = (seed, k, split, repr(self.variant(**sections)))
        if key not in self._fixed:
            m = self.model(seed, **sections)
            self._fixed[key] = track_all(m, self.data[split], ExitPolicy.fixed(k, m.num_exits))
        return self._fixed[key]

    def adaptive(self, seed: int):
        """Calibrated adaptive run on test and its compute-matched random counterpart."""
        if seed not in self._adaptive:
            m = self.model(seed)
            cal = calibrate(m, self.data["val"])
            ada = track_all(m, self.data["test"], ExitPolicy.adaptive(cal.best.tau))
            rnd = track_all(m, self.data["test"], match_cost_random_policy(ada, m.num_exits, seed))
            self._adaptive[seed] = (cal, ada, rnd)
        return self._adaptive[seed]


@pytest.fixture(scope="module")
def lab():
    return Lab()


# ---------------------------------------------------------------------------
# 1-5: oracles and invariants
# ---------------------------------------------------------------------------

def _param(rng, shape):
    return nx.Tensor(rng.standard_normal(shape), requires_grad=True)


def test_criterion_01_gradients(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    cases = {}
    att = Attention(8, 2, make_rng(1)).astype(np.float64)
    x = _param(rng, (2, 5, 8))
    cases["attention"] = check_gradients(lambda: att(x), [x, att.qkv.weight, att.proj.bias])
    mlp = MLP([8, 12, 8], make_rng(2)).astype(np.float64)
    cases["mlp"] = check_gradients(lambda: mlp(x), [x, mlp.layers[0].weight, mlp.layers[1].bias])
    ln = LayerNorm(8).astype(np.float64)
    ln.gain.data = rng.standard_normal(8)
    cases["layer norm"] = check_gradients(lambda: ln(x), [x, ln.gain, ln.bias])
    bb = Backbone(BackboneConfig(dim=8, heads=2, depth=2, exit_layers=(1, 2)), make_rng(3)).astype(np.float64)
    img = _param(rng, (1, 16, 16, 3))
    cases["patch embed"] = check_gradients(lambda: bb.embed_patches(img), [img, bb.patch_embed.weight])
    head = CornerHead(6, (4,), 3, make_rng(4)).astype(np.float64)
    tok = _param(rng, (2, 9, 6))
    cases["conv corner head"] = check_gradients(lambda: head(tok)[0], [tok, head.tl[0].weight, head.br[1].weight])
    score = MLP([8, 8, 8, 1], make_rng(5)).astype(np.float64)
    cases["score mlp"] = check_gradients(lambda: nx.sigmoid(score(x[:, 0])),
                                         [x, score.layers[0].weight, score.layers[2].weight])
    imit = ImitationAttention(4, 2, make_rng(6)).astype(np.float64)
    te, st, goal = _param(rng, (2, 4, 4)), _param(rng, (2, 4, 4)), nx.Tensor(rng.standard_normal((2, 4, 4)))
    cases["imitation attention"] = check_gradients(lambda: cosine_imitation(imit(te, st), goal),
                                                   [st, te, imit.channel_w, imit.spatial_w, imit.channel_b])
    worst = {k: max(v) for k, v in cases.items()}
    elapsed = time.perf_counter() - t0
    bad = [k for k, v in worst.items() if not v <= 1e-4]
    verdict(record_property, not bad and elapsed < 60,
            f"max relative error {max(worst.values()):.1e} over {len(worst)} layer types in {elapsed:.1f}s"
            + (f"; failing: {bad}" if bad else ""))


def test_criterion_02_loss_oracles(record_property):
    pairs = [
        (iou(BoundingBox.from_corners(0, 0, 2, 2), BoundingBox.from_corners(1, 1, 3, 3)), 1 / 7),
        (iou(BoundingBox.from_corners(0, 0, 1, 1), BoundingBox.from_corners(0, 0, 1, 1)), 1.0),
        (iou(BoundingBox.from_corners(0, 0, 1, 1), BoundingBox.from_corners(2, 2, 3, 3)), 0.0),
        (giou_loss(nx.Tensor(np.array([[0.0, 0, 1, 1]])), nx.Tensor(np.array([[2.0, 2, 3, 3]]))).item(), 1 + 7 / 9),
        (giou_loss(nx.Tensor(np.array([[0.0, 0, 1, 1]])), nx.Tensor(np.array([[0.0, 0, 1, 1]]))).item(), 0.0),
        (cosine_imitation(nx.Tensor(np.array([[1.0, 0.0]])), nx.Tensor(np.array([[0.0, 1.0]]))).item(), 1.0),
        (cosine_imitation(nx.Tensor(np.array([[1.0, 2.0]])), nx.Tensor(np.array([[-1.0, -2.0]]))).item(), 2.0),
        (cosine_imitation(nx.Tensor(np.array([[1.0, 2.0]])), nx.Tensor(np.array([[2.0, 4.0]]))).item(), 0.0),
        (score_loss(nx.Tensor(np.array([0.8])), [0.5]).item(), 0.09),
    ]
    err = max(abs(a - b) for a, b in pairs)
    verdict(record_property, err <= 1e-6, f"{len(pairs)} hand-derived values, max abs error {err:.1e}")


def test_criterion_03_pareto_oracle(record_property):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(1, 201))
        pts = [TradeoffPoint(float(s), float(p)) for s, p in zip(rng.integers(1, 40, n), rng.integers(0, 40, n))]
        brute = [p for p in pts if not any(dominates(q, p) for q in pts)]
        mismatches += sorted(map(id, pareto_front(pts))) != sorted(map(id, brute))
    table = [TradeoffPoint(90, 69.2, "base"), TradeoffPoint(127, 67.5, "medi"), TradeoffPoint(185, 65.6, "fast"),
             TradeoffPoint(58, 69.1, "slower"), TradeoffPoint(110, 64.0, "worse")]
    table_ok = [p.label for p in pareto_front(table)] == ["fast", "medi", "base"]
    elapsed = time.perf_counter() - t0
    verdict(record_property, mismatches == 0 and table_ok and elapsed < 1.0,
            f"{mismatches} mismatches over 100 random sets, reference table ok={table_ok}, {elapsed:.2f}s")


def test_criterion_04_exit_rule(record_property):
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(10_000):
        K = int(rng.integers(1, 6))
        s, tau = rng.random(K), rng.random(K - 1)
        hits = [k for k in range(1, K) if s[k - 1] > tau[k - 1]]
        want = min(hits) if hits else K
        got = exit_from_scores(s, tau)
        step = next(k for k in range(1, K + 1) if select_exit(k, s[k - 1], tau))
        mismatches += (got != want) + (step != want)
    verdict(record_property, mismatches == 0, f"{mismatches} mismatches over 10000 random tuples")


def test_criterion_05_static_equivalence(record_property):
    cfg = RunConfig().validate()
    model = EarlyExitTracker(cfg, 7, imitation=False)
    seqs = generate_split(replace(cfg, data=dict(seq_length=12, test_per_level=1)).data, "test", 5)
    K = model.num_exits
    same_hi = same_lo = True
    for a, b in zip(track_all(model, seqs, ExitPolicy.adaptive((1.01,) * (K - 1))),
                    track_all(model, seqs, ExitPolicy.fixed(K, K))):
        same_hi &= np.array_equal(a.boxes, b.boxes)
    for a, b in zip(track_all(model, seqs, ExitPolicy.adaptive((-0.01,) * (K - 1))),
                    track_all(model, seqs, ExitPolicy.fixed(1, K))):
        same_lo &= np.array_equal(a.boxes, b.boxes)
    verdict(record_property, same_hi and same_lo,
            f"tau>1 == fixed({K}): {same_hi}; tau<0 == fixed(1): {same_lo}")


# ---------------------------------------------------------------------------
# 6-12: trends after training
# ---------------------------------------------------------------------------

def test_criterion_06_monotone_exit_quality(lab, record_property):
    per_seed = np.array([[mean_iou(lab.fixed(s, k)) for k in (1, 2, 3)] for s in SEEDS])
    means = per_seed.mean(axis=0)
    seconds = [lab.train_seconds(s) for s in SEEDS]
    longest = max((t for t in seconds if t is not None), default=float("nan"))
    ok = means[0] <= means[1] <= means[2] and means[2] - means[0] >= 0.03 and not longest > 1800
    verdict(record_property, ok,
            "fixed(1..3) mean IoU " + " / ".join(f"{100 * m:.2f}" for m in means)
            + f", gap {100 * (means[2] - means[0]):+.2f} pts, longest training {longest:.0f}s")


def test_criterion_07_adaptive_beats_random(lab, record_property):
    gains, cost_gaps = [], []
    for s in SEEDS:
        _, ada, rnd = lab.adaptive(s)
        gains.append(mean_iou(ada) - mean_iou(rnd))
        cost_gaps.append(abs(mean_flops(rnd) - mean_flops(ada)) / mean_flops(ada))
    gain = float(np.mean(gains))
    verdict(record_property, gain >= 0.01 and max(cost_gaps) <= 0.02,
            f"adaptive - random {100 * gain:+.2f} IoU pts (per seed "
            + ", ".join(f"{100 * g:+.2f}" for g in gains) + f"), max FLOP gap {100 * max(cost_gaps):.2f}%")


def test_criterion_08_recycling(lab, record_property):
    def early(**sec):
        return np.mean([[mean_iou(lab.fixed(s, k, **sec)) for k in (1, 2)] for s in SEEDS], axis=0)

    reuse = early()
    none = early(exits=dict(reuse="none"))
    gap = float(reuse.mean() - none.mean())
    verdict(record_property, gap >= 0.0,
            f"input_sum - none at exits 1-2: {100 * gap:+.2f} IoU pts "
            f"(exit 1 {100 * (reuse[0] - none[0]):+.2f}, exit 2 {100 * (reuse[1] - none[1]):+.2f})")


def test_criterion_09_distillation(lab, record_property):
    def exit1(mode):
        return float(np.mean([mean_iou(lab.fixed(s, 1, train=dict(distill=mode))) for s in SEEDS]))

    on, off, plain = exit1("on"), exit1("off"), exit1("plain")
    verdict(record_property, on - off >= 0.005 and on >= plain,
            f"exit-1 IoU on {100 * on:.2f}, off {100 * off:.2f}, plain {100 * plain:.2f}: "
            f"on-off {100 * (on - off):+.2f}, on-plain {100 * (on - plain):+.2f} pts")


def test_criterion_10_cost_accounting(lab, record_property):
    model = lab.model(SEEDS[0])
    seqs = lab.data["test"][::10]
    ms = []
    for k in (1, 2, 3):
        per_seq = [track_sequence(model, s, ExitPolicy.fixed(k, 3), timed=True).ms for s in seqs]
        # warm-up frames of each sequence are dropped before taking the median
        ms.append(float(np.median(np.concatenate([m[min(len(m) // 2, 20):] for m in per_seq]))))
    hand = 3 * 81 * 64 ** 2 + 2 * 81 ** 2 * 64 + 81 * 64 ** 2 + 2 * 81 * 64 * 256
    flops_ok = layer_flops(81, 64, 4, 4.0) == hand == model.backbone.layer_flops()
    ratio = ms[2] / ms[0]
    verdict(record_property, ms[0] < ms[1] < ms[2] and ratio >= 1.5 and flops_ok,
            "median ms/frame " + " / ".join(f"{m:.2f}" for m in ms)
            + f", fixed(3)/fixed(1) {ratio:.2f}x, layer FLOPs {layer_flops(81, 64, 4, 4.0)} vs hand {hand}")


def test_criterion_11_exit_depth_trend(lab, record_property):
    results = [r for s in SEEDS for r in lab.adaptive(s)[1]]
    rep = exit_depth_report(results)
    verdict(record_property, rep.non_increasing and rep.p_value < 0.05,
            "IoU by realized exit " + ", ".join(f"e{r['exit']}={100 * r['mean_iou']:.1f} (n={r['frames']})"
                                                for r in rep.rows)
            + f"; sign test {rep.sign_positive}/{rep.sign_total}, p={rep.p_value:.3g}")


def test_criterion_12_score_head(lab, record_property):
    corrs = []
    for s in SEEDS:
        res = lab.fixed(s, 3, split="val")
        corrs.append(float(np.corrcoef(pooled(res, "scores"), pooled(res, "ious"))[0, 1]))
    verdict(record_property, min(corrs) >= 0.3,
            "Pearson(s_K, IoU) on validation per seed " + ", ".join(f"{c:.3f}" for c in corrs))


# ---------------------------------------------------------------------------
# 13: reproducibility of the command-line pipeline
# ---------------------------------------------------------------------------

def test_criterion_13_reproducibility(tmp_path, record_property):
    from exitrack import config as config_mod
    from exitrack.cli import main
    from tests.conftest import tiny_config

    cfg = tmp_path / "tiny.ini"
    config_mod.save(cfg, tiny_config())
    for run in ("a", "b"):
        root = tmp_path / run
        steps = [
            ["gen-data", "--out", str(root / "data")],
            ["train", "--data", str(root / "data"), "--out", str(root / "model")],
            ["calibrate", "--ckpt", str(root / "model"), "--data", str(root / "data"), "--out", str(root / "cal")],
            ["eval", "--ckpt", str(root / "model"), "--data", str(root / "data"), "--policy", "random",
             "--difficulty", "--out", str(root / "eval")],
            ["track", "--ckpt", str(root / "model"), "--seq", str(root / "data" / "test" / "L0-test-000"),
             "--out", str(root / "track")],
        ]
        for argv in steps:
            assert main(argv + ["--config", str(cfg), "--seed", "3"]) == 0, argv
    compared = differing = 0
    for path in sorted((tmp_path / "a").rglob("*.csv")):
        other = tmp_path / "b" / path.relative_to(tmp_path / "a")
        lines_a, lines_b = path.read_text().splitlines(), other.read_text().splitlines()
        header = lines_a[0].split(",")
        drop = [i for i, c in enumerate(header) if c == "ms"]
        strip = [[v for i, v in enumerate(line.split(",")) if i not in drop] for line in lines_a]
        strip_b = [[v for i, v in enumerate(line.split(",")) if i not in drop] for line in lines_b]
        compared += 1
        differing += strip != strip_b
    weights_same = (tmp_path / "a" / "model" / "model.dytx").read_bytes() == \
        (tmp_path / "b" / "model" / "model.dytx").read_bytes()
    verdict(record_property, differing == 0 and compared > 0 and weights_same,
            f"{compared} CSV files compared (wall-clock column excluded), {differing} differ; "
            f"checkpoints identical={weights_same}")
