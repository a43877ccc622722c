import numpy as np
import pytest
from hypothesis import given, strategies as st

from exitrack.boxes import BoundingBox, iou_xywh
from exitrack.config import DataConfig
from exitrack.data import (DIFFICULTY_TABLE, DataError, Sequence, crop_pair, generate_sequence, generate_split,
                           level_config, parse_groundtruth, read_dataset, read_sequence, reference_iou,
                           write_dataset, write_sequence)
from exitrack.numerics.random import make_rng


def seq_for(level=0, seed=0, length=12):
    cfg = level_config(level, DataConfig(seq_length=length))
    return generate_sequence(cfg, make_rng(seed, "t", level), name=f"s{level}")


class TestGenerator:
    def test_same_seed_identical_pixels(self):
        a, b = seq_for(2, 5), seq_for(2, 5)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.image, fb.image)
            np.testing.assert_array_equal(fa.gt_box, fb.gt_box)

    def test_different_seed_differs(self):
        assert not np.array_equal(seq_for(1, 0).frames[0].image, seq_for(1, 1).frames[0].image)

    @pytest.mark.parametrize("level", range(5))
    def test_boxes_inside_frame(self, level):
        seq = seq_for(level, level, length=20)
        n = seq.frames[0].image.shape[0]
        full = np.array([0.0, 0.0, n, n])
        for f in seq.frames:
            x, y, w, h = f.gt_box
            assert w >= 1 and h >= 1 and x >= 0 and y >= 0 and x + w <= n and y + h <= n
            # containment: overlap with the frame equals the box's share of the frame
            assert iou_xywh(f.gt_box[None], full[None])[0] == pytest.approx(w * h / n ** 2)

    def test_pixels_in_unit_range(self):
        p = seq_for(3).frames[0].pixels
        assert p.dtype == np.float32 and p.min() >= 0 and p.max() <= 1

    def test_easiest_level_has_no_distractors_or_occlusion(self):
        cfg = level_config(0)
        assert cfg.distractors == 0 and cfg.occlusion_prob == 0
        assert not {"distractor", "occlusion"} & cfg.attributes()

    def test_hardest_level_table(self):
        cfg = level_config(4)
        assert cfg.distractors >= 3 and cfg.occlusion_prob >= 0.3 and cfg.similarity >= 0.9
        assert DIFFICULTY_TABLE[4]["distractors"] == cfg.distractors

    def test_impossible_target_size(self):
        cfg = level_config(0, DataConfig(frame_size=32, target_size_min=20.0, target_size_max=30.0))
        with pytest.raises(DataError):
            generate_sequence(cfg, make_rng(0))

    def test_split_naming_and_counts(self):
        seqs = generate_split(DataConfig(seq_length=4, val_per_level=2, levels=3), "val", 0)
        assert [s.name for s in seqs[:3]] == ["L0-val-000", "L0-val-001", "L1-val-000"]
        assert [s.difficulty for s in seqs] == [0, 0, 1, 1, 2, 2]

    def test_sequence_needs_two_frames(self):
        with pytest.raises(DataError):
            Sequence("x", seq_for().frames[:1])


class TestCrops:
    def test_zero_jitter_centres_target(self):
        seq = seq_for(1)
        pair = crop_pair(seq, 0, 3)
        assert pair.target_box.cx == pytest.approx(0.5, abs=1e-9)
        assert pair.target_box.cy == pytest.approx(0.5, abs=1e-9)
        assert pair.template.shape == (32, 32, 3) and pair.search.shape == (64, 64, 3)

    def test_search_side_is_four_object_sides(self):
        seq = seq_for(0)
        x, y, w, h = seq.frames[2].gt_box
        pair = crop_pair(seq, 0, 2)
        assert pair.geometry.side == pytest.approx(4 * np.sqrt(w * h))

    def test_object_16px_gives_64px_window(self):
        from exitrack.data import search_window

        assert search_window([10, 10, 16, 16]).side == pytest.approx(64.0)

    @given(st.integers(0, 4), st.integers(0, 1000), st.floats(0, 3), st.floats(0, 0.5))
    def test_back_projection_recovers_box(self, level, seed, cj, sj):
        seq = seq_for(level, seed % 7, length=6)
        pair = crop_pair(seq, 0, 5, make_rng(seed), center_jitter=cj, scale_jitter=sj)
        tb = pair.target_box
        assert 0 <= tb.cx <= 1 and 0 <= tb.cy <= 1 and 0 < tb.w <= 1 and 0 < tb.h <= 1
        inside = all(0 <= v <= 1 for v in pair.geometry.to_crop(seq.frames[5].gt_box).corners())
        if inside:
            back = pair.geometry.to_frame(tb)
            np.testing.assert_allclose(back, seq.frames[5].gt_box, atol=0.5)

    def test_far_jitter_pads_with_mean(self):
        seq = seq_for(0)
        pair = crop_pair(seq, 0, 1, make_rng(0), center_jitter=40.0)
        assert np.isfinite(pair.search).all()
        assert pair.search.shape == (64, 64, 3)


class TestIO:
    def test_round_trip(self, tmp_path):
        seq = seq_for(3, length=5)
        back = read_sequence(write_sequence(seq, tmp_path))
        assert back.name == seq.name and back.difficulty == 3 and back.attributes == seq.attributes
        for a, b in zip(seq.frames, back.frames):
            np.testing.assert_array_equal(a.gt_box, b.gt_box)
            np.testing.assert_array_equal(a.image, b.image)

    def test_dataset_round_trip(self, tmp_path):
        seqs = [seq_for(0, 0, 4), seq_for(1, 1, 4)]
        write_dataset(seqs, tmp_path)
        assert [s.name for s in read_dataset(tmp_path)] == ["s0", "s1"]

    def test_annotation_format(self):
        np.testing.assert_array_equal(parse_groundtruth("10,20,30,40\n"), [[10, 20, 30, 40]])

    def test_malformed_line_reports_number(self):
        with pytest.raises(DataError, match="line 2"):
            parse_groundtruth("1,2,3,4\n1,2,3\n")

    def test_missing_groundtruth(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(FileNotFoundError):
            read_sequence(tmp_path / "empty")


class TestDifficulty:
    def test_reference_tracker_monotone(self):
        # 20 sequences per level, shortened to keep the check quick
        data = DataConfig(seq_length=16, test_per_level=20)
        means = [np.mean([reference_iou(s) for s in generate_split(data, "test", 11)
                          if s.difficulty == lvl]) for lvl in range(5)]
        assert all(a >= b for a, b in zip(means, means[1:])), means


def test_bounding_box_clamped_is_valid():
    b = BoundingBox(1.2, -0.1, 0.0, 3.0).clamped()
    assert b.is_valid()
