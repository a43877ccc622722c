import numpy as np
import pytest
from hypothesis import given, strategies as st

from exitrack import numerics as nx
from exitrack.backbone import Attention, Backbone, EncoderRun, TokenSequence, layer_flops, patchify
from exitrack.config import BackboneConfig, ConfigError, RunConfig
from exitrack.numerics.random import make_rng


def images(rng, b, size):
    return nx.Tensor(rng.random((b, size, size, 3)).astype(np.float32))


@pytest.fixture
def backbone():
    return Backbone(RunConfig().backbone, make_rng(0, "bb"))


class TestLayout:
    def test_default_token_counts(self, backbone, rng):
        seq = backbone.embed(images(rng, 2, 32), images(rng, 2, 64))
        assert (seq.n_z, seq.n_x, seq.length) == (16, 64, 81)
        assert seq.tokens.shape == (2, 81, 64)
        assert seq.iou_slot().shape == (2, 1, 64)
        assert seq.template_slots().shape == (2, 16, 64)
        assert seq.search_slots().shape == (2, 64, 64)

    def test_iou_token_shared_across_batch(self, backbone, rng):
        seq = backbone.embed(images(rng, 3, 32), images(rng, 3, 64))
        first = seq.iou_slot().data
        np.testing.assert_array_equal(first[0], first[2])

    def test_layout_enforced(self):
        t = nx.Tensor(np.zeros((1, 4, 8), np.float32))
        one = nx.Tensor(np.zeros((1, 1, 8), np.float32))
        with pytest.raises(ConfigError, match="layout"):
            TokenSequence.assemble(iou=one, template=t, search=t, n_z=4, n_x=3)
        with pytest.raises(ConfigError, match="layout"):
            TokenSequence.assemble(iou=t, template=t, search=t, n_z=4, n_x=4)

    def test_dims_must_agree(self):
        with pytest.raises(ConfigError, match="dims"):
            TokenSequence.assemble(iou=nx.Tensor(np.zeros((1, 1, 4), np.float32)),
                                   template=nx.Tensor(np.zeros((1, 2, 8), np.float32)),
                                   search=nx.Tensor(np.zeros((1, 2, 8), np.float32)), n_z=2, n_x=2)


class TestPatchify:
    def test_row_major_order(self):
        img = np.arange(4 * 4 * 1, dtype=np.float32).reshape(1, 4, 4, 1)
        out = patchify(nx.Tensor(img), 2).data
        assert out.shape == (1, 4, 4)
        np.testing.assert_array_equal(out[0, 0], [0, 1, 4, 5])
        np.testing.assert_array_equal(out[0, 1], [2, 3, 6, 7])
        np.testing.assert_array_equal(out[0, 2], [8, 9, 12, 13])

    def test_indivisible(self):
        with pytest.raises(ConfigError, match="divisible"):
            patchify(nx.Tensor(np.zeros((1, 10, 10, 3), np.float32)), 8)


class TestCost:
    def test_hand_count(self):
        # 81 tokens, D=64, ratio 4: 3*81*64^2 + 2*81^2*64 + 81*64^2 + 2*81*64*256
        assert layer_flops(81, 64, 4, 4.0) == 4_821_120

    def test_backbone_layer_flops(self, backbone):
        assert backbone.layer_flops() == 4_821_120

    def test_heads_do_not_change_cost(self):
        assert layer_flops(81, 64, 1, 4.0) == layer_flops(81, 64, 8, 4.0)


class TestEncoder:
    def test_resume_equals_single_pass(self, backbone, rng):
        seq = backbone.embed(images(rng, 2, 32), images(rng, 2, 64))
        whole = backbone.encode_until(seq, 0, 6)
        part = backbone.encode_until(backbone.encode_until(seq, 0, 2), 2, 6)
        np.testing.assert_array_equal(whole.tokens.data, part.tokens.data)
        assert part.layer == 6

    def test_bad_ranges(self, backbone, rng):
        seq = backbone.embed(images(rng, 1, 32), images(rng, 1, 64))
        with pytest.raises(ValueError):
            backbone.encode_until(seq, 0, 7)
        with pytest.raises(ValueError):
            backbone.encode_until(seq, 2, 2)
        with pytest.raises(ValueError, match="layer 0"):
            backbone.encode_until(seq, 1, 3)

    def test_zero_output_weights_are_identity(self, rng):
        bb = Backbone(BackboneConfig(depth=2), make_rng(1))
        for blk in bb.blocks:
            for lin in (blk.attn.proj, blk.fc2):
                lin.weight.data[:] = 0
                lin.bias.data[:] = 0
        seq = bb.embed(images(rng, 1, 32), images(rng, 1, 64))
        np.testing.assert_array_equal(bb.encode_until(seq, 0, 2).tokens.data, seq.tokens.data)

    def test_attention_rows_sum_to_one(self, rng):
        att = Attention(16, 4, make_rng(3))
        w, _ = att.weights(nx.Tensor(rng.standard_normal((2, 9, 16)).astype(np.float32)))
        assert w.shape == (2, 4, 9, 9)
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)

    @given(st.permutations(list(range(6))))
    def test_attention_permutation_equivariant(self, perm):
        att = Attention(8, 2, make_rng(4)).astype(np.float64)
        x = np.random.default_rng(0).standard_normal((1, 6, 8))
        out = att(nx.Tensor(x)).data
        out_p = att(nx.Tensor(x[:, perm])).data
        np.testing.assert_allclose(out_p, out[:, perm], atol=1e-10)


class TestEncoderRun:
    def test_taps_recorded_at_exit_layers(self, backbone, rng):
        run = EncoderRun(backbone, backbone.embed(images(rng, 1, 32), images(rng, 1, 64)))
        run.advance_to(4)
        assert run.tap(2).shape == (1, 81, 64)
        with pytest.raises(KeyError, match="not been reached"):
            run.tap(1)

    def test_taps_match_direct_encoding(self, backbone, rng):
        seq = backbone.embed(images(rng, 1, 32), images(rng, 1, 64))
        run = EncoderRun(backbone, seq)
        for layer in (2, 4, 6):
            run.advance_to(layer)
        assert set(run.taps) == {2, 4, 6}
        np.testing.assert_array_equal(run.tap(1).data, backbone.encode_until(seq, 0, 2).tokens.data)

    def test_unknown_exit(self, backbone, rng):
        run = EncoderRun(backbone, backbone.embed(images(rng, 1, 32), images(rng, 1, 64)))
        with pytest.raises(KeyError, match="not configured"):
            run.tap(4)
