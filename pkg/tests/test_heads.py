import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ape.errors import ConfigError, DataError
from ape.heads import (
    AlignmentHead,
    HeadConfig,
    LookupHead,
    MlpHead,
    count_params,
    mlp_param_count,
)
from ape.loss import contrastive_loss
from ape.tensor import Tape, Tensor
from tests.conftest import random_batch

INV_SQRT2 = 0.7071067811865476


def identity_head(d, **kw):
    cfg = HeadConfig(kind="mlp", d_tok=d, d_img=d, layers=1, **kw)
    head = AlignmentHead(cfg, seed=0)
    head.text_mlp.weights[0].data = np.eye(d, dtype=np.float32)
    head.text_mlp.biases[0].data = np.zeros(d, dtype=np.float32)
    return head


class TestEmbedText:
    def test_identity_mlp_constant_sequence_pools_to_normalized_v(self):
        head = identity_head(2)
        v = np.asarray([3.0, 4.0], dtype=np.float32)
        tokens = np.tile(v, (1, 3, 1))
        mask = np.asarray([[True, True, False]])
        out = head.embed_text(tokens, mask, None, None)
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], rtol=1e-6)

    def test_mask_excludes_second_token(self):
        head = identity_head(2)
        tokens = np.asarray([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
        out = head.embed_text(tokens, np.asarray([[True, False]]), None, None)
        # normalize([1, 2]) = [1, 2] / sqrt(5)
        np.testing.assert_allclose(out.data, [[0.4472136, 0.8944272]], rtol=1e-6)

    def test_lookup_mean_of_rows(self):
        head = AlignmentHead(
            HeadConfig(kind="lookup", d_tok=2, d_img=2, vocab_size=3), seed=0
        )
        head.lookup.table.data = np.asarray(
            [[9.0, 9.0], [1.0, 0.0], [0.0, 1.0]], dtype=np.float32
        )
        out = head.embed_text(None, None, np.asarray([1, 2]), np.asarray([0, 2]))
        # mean(r1, r2) = [0.5, 0.5]; normalized -> [1, 1]/sqrt(2)
        np.testing.assert_allclose(out.data, [[INV_SQRT2, INV_SQRT2]], rtol=1e-6)

    def test_lookup_single_token_is_normalized_row_exactly(self):
        head = AlignmentHead(
            HeadConfig(kind="lookup", d_tok=2, d_img=2, vocab_size=4), seed=1
        )
        row = head.lookup.table.data[3]
        out = head.embed_text(None, None, np.asarray([3]), np.asarray([0, 1]))
        np.testing.assert_allclose(out.data[0], row / np.linalg.norm(row), rtol=1e-6)

    def test_all_masked_row_is_an_error(self):
        head = identity_head(2)
        tokens = np.zeros((1, 2, 2), dtype=np.float32)
        with pytest.raises(DataError, match="all-masked"):
            head.embed_text(tokens, np.asarray([[False, False]]), None, None)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 1000))
    def test_token_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        cfg = HeadConfig(kind="mlp", d_tok=5, d_img=6, layers=3, hidden=7)
        head = AlignmentHead(cfg, seed=2)
        t = 6
        tokens = rng.normal(size=(2, t, 5)).astype(np.float32)
        mask = rng.random((2, t)) < 0.7
        mask[:, 0] = True
        perm = rng.permutation(t)
        out = head.embed_text(tokens, mask, None, None).data
        out_p = head.embed_text(tokens[:, perm], mask[:, perm], None, None).data
        np.testing.assert_allclose(out, out_p, rtol=1e-5, atol=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 1000))
    def test_unit_norm_rows_both_heads(self, seed):
        rng = np.random.default_rng(seed)
        batch = random_batch(rng, 4, 3, 5, 6, vocab=8)
        mlp = AlignmentHead(HeadConfig(kind="mlp", d_tok=5, d_img=6, layers=2), seed=3)
        lut = AlignmentHead(HeadConfig(kind="lookup", d_tok=5, d_img=6, vocab_size=8), seed=3)
        for head in (mlp, lut):
            img, txt = head.embed_batch(batch)
            np.testing.assert_allclose(np.linalg.norm(txt.data, axis=1), 1.0, atol=1e-5)
            np.testing.assert_allclose(np.linalg.norm(img.data, axis=1), 1.0, atol=1e-5)


class TestEmbedImage:
    def test_identity_path_normalizes(self):
        head = identity_head(2)
        out = head.embed_image(np.asarray([[3.0, 4.0]], dtype=np.float32))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], rtol=1e-6)

    def test_identity_path_fixes_unit_vectors(self):
        head = identity_head(3)
        v = np.asarray([[0.0, 1.0, 0.0]], dtype=np.float32)
        np.testing.assert_allclose(head.embed_image(v).data, v, atol=1e-7)

    def test_identity_initialized_image_mlp_matches_identity_path(self):
        cfg = HeadConfig(kind="mlp", d_tok=2, d_img=2, layers=1, image_layers=1)
        head = AlignmentHead(cfg, seed=0)
        head.image_mlp.weights[0].data = np.eye(2, dtype=np.float32)
        head.image_mlp.biases[0].data = np.zeros(2, dtype=np.float32)
        out = head.embed_image(np.asarray([[3.0, 4.0]], dtype=np.float32))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], rtol=1e-6)

    def test_dim_mismatch_with_disabled_head_is_config_error(self):
        with pytest.raises(ConfigError, match="d_img"):
            AlignmentHead(HeadConfig(kind="mlp", d_tok=4, d_img=4, d_out=8, layers=1), seed=0)


class TestGradientFlow:
    def test_inputs_receive_no_gradients(self, rng):
        head = AlignmentHead(HeadConfig(kind="mlp", d_tok=4, d_img=4, layers=2), seed=0)
        batch = random_batch(rng, 3, 2, 4, 4)
        tape = Tape()
        tokens = Tensor(batch.tokens)
        img_in = Tensor(batch.images)
        txt = head.embed_text(tokens, batch.mask, None, None, tape)
        img = head.embed_image(img_in, tape)
        loss = contrastive_loss(img, txt, head.log_scale, tape)
        tape.backward(loss)
        assert tokens.grad is None and img_in.grad is None
        assert head.log_scale.grad is not None
        for p in head.text_mlp.parameters():
            assert p.grad is not None and p.grad.shape == p.data.shape


class TestTemperature:
    def test_init_value(self):
        head = AlignmentHead(HeadConfig(kind="mlp", d_tok=2, d_img=2, layers=1), seed=0)
        assert head.scale() == pytest.approx(1.0 / 0.07, rel=1e-4)

    def test_clamped_to_max_scale(self):
        cfg = HeadConfig(kind="mlp", d_tok=2, d_img=2, layers=1, temperature_init=10.0)
        head = AlignmentHead(cfg, seed=0)
        assert head.scale() <= 100.0 * (1 + 1e-6)

    def test_clamp_after_manual_update(self):
        head = AlignmentHead(HeadConfig(kind="mlp", d_tok=2, d_img=2, layers=1), seed=0)
        head.log_scale.data = np.asarray([7.0], dtype=np.float32)
        head.clamp_temperature()
        assert head.scale() <= 100.0 * (1 + 1e-6)


class TestCountParams:
    def test_four_layers_768(self):
        cfg = HeadConfig(kind="mlp", d_tok=768, d_img=768, layers=4, hidden=768)
        assert count_params(cfg)["text_head"] == 2_362_368

    def test_lookup_32000_by_768(self):
        cfg = HeadConfig(kind="lookup", d_tok=768, d_img=768, vocab_size=32_000)
        assert count_params(cfg)["text_head"] == 24_576_000

    def test_empty_mlp_counts_zero(self):
        cfg = HeadConfig(kind="mlp", d_tok=768, d_img=768, layers=0)
        assert count_params(cfg)["text_head"] == 0
        assert mlp_param_count([768]) == 0

    def test_ratio_against_declared_tower(self):
        cfg = HeadConfig(kind="mlp", d_tok=768, d_img=768, layers=4, hidden=768)
        counts = count_params(cfg, text_tower_params=110_000_000)
        assert counts["text_head_ratio"] == pytest.approx(2_362_368 / 110_000_000)

    def test_default_widths(self):
        cfg = HeadConfig(kind="mlp", d_tok=100, d_img=64, layers=4)
        assert cfg.text_widths() == [100, 200, 200, 200, 64]
        assert cfg.out_dim == 64

    def test_constructed_mlp_needs_at_least_one_layer(self):
        with pytest.raises(ConfigError):
            AlignmentHead(HeadConfig(kind="mlp", d_tok=4, d_img=4, layers=0), seed=0)

    def test_layer_bounds(self):
        with pytest.raises(ConfigError):
            HeadConfig(kind="mlp", d_tok=4, d_img=4, layers=9)
