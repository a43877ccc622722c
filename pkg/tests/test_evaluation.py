import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from exitrack.evaluation import (TradeoffPoint, difficulty_report, dominates, exit_depth_report, metric_report,
                                 pareto_front, precision_at, read_points, sampled_auc, success_auc,
                                 success_curve, write_points, write_rows)
from exitrack.inference import TrackResult


def result(name, ious, exits, difficulty=0, attributes=()):
    n = len(ious)
    return TrackResult(name, difficulty, frozenset(attributes), np.zeros((n, 4)), np.asarray(exits),
                       np.zeros(n), np.full(n, 10), np.full(n, np.nan), np.zeros(n, bool),
                       np.asarray(ious, dtype=float), np.asarray(ious, dtype=float) * 10)


def brute_force_front(points):
    return [p for p in points if not any(dominates(q, p) for q in points)]


class TestSuccess:
    def test_half(self):
        assert success_auc([1.0, 0.0]) == 50.0

    def test_curve(self):
        thr, frac = success_curve([0.3, 0.8], points=11)
        assert frac[0] == 1.0 and frac[-1] == 0.0
        assert frac[3] == 0.5  # 0.3 is not strictly above 0.3

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=300))
    def test_sampled_auc_close_to_continuous(self, ious):
        assert abs(sampled_auc(ious) - success_auc(ious)) <= 2.5 + 1e-9

    @pytest.mark.parametrize("bad", [[], [1.2], [-0.1, 0.5]])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            success_auc(bad)

    def test_precision(self):
        assert precision_at([1.0, 5.0, 5.1, 20.0]) == 50.0
        assert precision_at([3.0], threshold=2.0) == 0.0


class TestPareto:
    def test_example_front(self):
        # speed (fps) and precision of published operating points plus two dominated ones
        pts = [TradeoffPoint(90, 69.2, "base"), TradeoffPoint(127, 67.5, "medi"), TradeoffPoint(185, 65.6, "fast"),
               TradeoffPoint(58, 69.1, "slow-heavy"), TradeoffPoint(120, 64.9, "slow-light")]
        assert [p.label for p in pareto_front(pts)] == ["fast", "medi", "base"]

    def test_random_sets_match_brute_force(self):
        rng = np.random.default_rng(7)
        t0 = time.perf_counter()
        for _ in range(100):
            n = int(rng.integers(1, 201))
            # coarse grid so ties and duplicates occur
            pts = [TradeoffPoint(float(s), float(p)) for s, p in zip(rng.integers(1, 30, n), rng.integers(0, 30, n))]
            got = pareto_front(pts)
            want = brute_force_front(pts)
            assert sorted(map(id, got)) == sorted(map(id, want))
        assert time.perf_counter() - t0 < 1.0

    def test_duplicates_kept(self):
        a, b = TradeoffPoint(2, 3, "a"), TradeoffPoint(2, 3, "b")
        assert pareto_front([a, b]) == [a, b]

    @given(st.lists(st.tuples(st.floats(0.1, 100), st.floats(0, 100)), min_size=1, max_size=40))
    def test_idempotent_and_sorted(self, raw):
        pts = [TradeoffPoint(s, p) for s, p in raw]
        front = pareto_front(pts)
        assert pareto_front(front) == front
        assert [p.speed for p in front] == sorted((p.speed for p in front), reverse=True)

    def test_invalid_points(self):
        with pytest.raises(ValueError):
            TradeoffPoint(0.0, 1.0)
        with pytest.raises(ValueError):
            TradeoffPoint(1.0, float("nan"))
        with pytest.raises(ValueError):
            pareto_front([])

    def test_csv_round_trip(self, tmp_path):
        pts = [TradeoffPoint(1.5, 2.25, "x"), TradeoffPoint(3.0, 1.0, "")]
        write_points(pts, tmp_path / "p.csv")
        assert read_points(tmp_path / "p.csv") == pts

    def test_missing_columns(self, tmp_path):
        (tmp_path / "p.csv").write_text("fps,prec\n1,2\n")
        with pytest.raises(ValueError, match="speed"):
            read_points(tmp_path / "p.csv")


class TestReports:
    def test_metric_report(self):
        rs = [result("a", [1.0, 0.5], [1, 3], 0), result("b", [0.0, 0.5], [2, 2], 2)]
        rep = metric_report(rs, 3, "x")
        assert rep.auc == 50.0 and rep.frames == 4
        assert rep.exit_fractions == (0.25, 0.5, 0.25)
        assert rep.per_level_iou == {0: 0.75, 2: 0.25}
        row = rep.as_row()
        assert row["frac_e2"] == 0.5 and row["iou_l2"] == 0.25

    def test_exit_depth_partition(self):
        rs = [result("a", [0.9, 0.8, 0.3], [1, 1, 3], attributes=["distractor"]),
              result("b", [0.7, 0.2], [1, 2]), result("c", [0.5, 0.5], [2, 2])]
        rep = exit_depth_report(rs)
        assert sum(r["frames"] for r in rep.rows) == 7
        assert [r["exit"] for r in rep.rows] == [1, 2, 3]
        assert rep.rows[0]["mean_iou"] == pytest.approx(0.8)
        assert rep.non_increasing
        assert (rep.sign_positive, rep.sign_total) == (2, 2)
        assert rep.p_value == pytest.approx(0.25)
        attrs = {r["attribute"]: r["mean_exit"] for r in rep.attribute_rows}
        assert attrs["distractor"] == pytest.approx(5 / 3)

    def test_difficulty_report(self, caplog):
        by_exit = {1: [result("a", [0.5], [1], 0), result("b", [0.2], [1], 1)],
                   3: [result("a", [0.6], [3], 0), result("b", [0.5], [3], 1)]}
        rows = difficulty_report(by_exit, levels=range(3))
        assert [r["level"] for r in rows] == [0, 1]
        assert rows[1]["gain_e3"] == pytest.approx(0.3)
        assert "level 2" in caplog.text

    def test_write_rows(self, tmp_path):
        write_rows([{"a": 1, "b": 0.1}, {"a": 2, "c": "x"}], tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text().splitlines() == ["a,b,c", "1,0.1,", "2,,x"]
        with pytest.raises(ValueError):
            write_rows([], tmp_path / "e.csv")
