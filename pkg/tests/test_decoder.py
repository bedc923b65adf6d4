"""Gated cross-attention decoder, prediction head, and their gradients."""

import math

import numpy as np
import pytest

from affseg.decoder import (
    DecoderLayerParams,
    DecoderParams,
    cls_mask,
    decode,
    decode_cached,
    decode_backward,
    decoder_layer,
    decoder_layer_cached,
    init_decoder,
    predict,
    predict_cached,
    predict_backward,
)
from tests.oracles import (
    bilinear_reference,
    central_difference,
    decoder_layer_reference,
    max_rel_err,
    softmax_rows,
)


def layer_params(C=2, cls_dim=2, rng=None, identity=True):
    if identity:
        eye = np.eye(C)
        return DecoderLayerParams(
            wq=eye.copy(), wk=eye.copy(), wv=eye.copy(),
            wc=np.eye(cls_dim, C),
            w1=np.zeros((C, 4 * C)), b1=np.zeros(4 * C),
            w2=np.zeros((4 * C, C)), b2=np.zeros(C),
        )
    # scales comparable to the real init: keeps the attention softmax away
    # from saturation, where finite differences lose their footing
    return DecoderLayerParams(
        wq=0.3 * rng.standard_normal((C, C)), wk=0.3 * rng.standard_normal((C, C)),
        wv=0.3 * rng.standard_normal((C, C)), wc=0.3 * rng.standard_normal((cls_dim, C)),
        w1=rng.standard_normal((C, 4 * C)) / math.sqrt(C), b1=0.1 * rng.standard_normal(4 * C),
        w2=0.1 * rng.standard_normal((4 * C, C)), b2=0.1 * rng.standard_normal(C),
    )


class TestClsMask:
    def test_zero_projection_gives_half(self):
        K = np.random.default_rng(0).standard_normal((5, 3))
        out = cls_mask(np.zeros(4), K, np.zeros((4, 3)))
        np.testing.assert_array_equal(out, np.full(5, 0.5))

    def test_negating_keys_mirrors_sigmoid(self):
        rng = np.random.default_rng(1)
        cls = rng.standard_normal(4)
        K = rng.standard_normal((6, 3))
        wc = rng.standard_normal((4, 3))
        a = cls_mask(cls, K, wc)
        b = cls_mask(cls, -K, wc)
        np.testing.assert_allclose(a + b, 1.0, atol=1e-12)

    def test_hand_case(self):
        # oracle: projected cls (1,0), keys ((2,0),(-2,0)), d_k=4:
        # logits (2,-2)/sqrt(4) = (1,-1) -> sigmoid = (0.7311, 0.2689)
        cls = np.array([1.0, 0.0])
        wc = np.eye(2)
        K = np.array([[2.0, 0.0], [-2.0, 0.0]])
        out = cls_mask(cls, K, wc, d_k=4)
        expected = np.array([1 / (1 + math.exp(-1)), 1 / (1 + math.exp(1))])
        np.testing.assert_allclose(out, [0.7311, 0.2689], atol=1e-4)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            out = cls_mask(
                rng.standard_normal(3) * 50,
                rng.standard_normal((8, 4)) * 50,
                rng.standard_normal((3, 4)),
            )
            assert (out > 0).all() and (out < 1).all()

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            cls_mask(np.zeros(3), np.zeros((4, 2)), np.zeros((2, 2)))


class TestDecoderLayer:
    def test_gate_neutral_with_zero_ffn_is_plain_attention(self):
        rng = np.random.default_rng(3)
        C = 4
        text = rng.standard_normal((3, C))
        visual = rng.standard_normal((5, C))
        p = layer_params(C=C, cls_dim=2, identity=True)
        p.wq, p.wk, p.wv = (rng.standard_normal((C, C)) for _ in range(3))
        out = decoder_layer(text, visual, np.zeros(2), p, use_gate=False)
        A = softmax_rows(text @ p.wq @ (visual @ p.wk).T / math.sqrt(C))
        np.testing.assert_allclose(out, A @ (visual @ p.wv) + text, atol=1e-12)

    def test_patch_permutation_invariance(self):
        rng = np.random.default_rng(4)
        C = 6
        text = rng.standard_normal((3, C))
        visual = rng.standard_normal((7, C))
        cls = rng.standard_normal(5)
        p = layer_params(C=C, cls_dim=5, rng=rng, identity=False)
        base = decoder_layer(text, visual, cls, p)
        perm = rng.permutation(7)
        permuted = decoder_layer(text, visual[perm], cls, p)
        np.testing.assert_allclose(permuted, base, atol=1e-10)

    def test_hand_case_identity_weights(self):
        # oracle: N=1, L=2, C=2, all maps identity; the oracle recomputes
        # the layer with scalar math
        text = np.array([[1.0, 0.0]])
        visual = np.array([[1.0, 1.0], [0.0, -1.0]])
        cls = np.array([0.5, -0.5])
        p = layer_params(C=2, cls_dim=2, identity=True)
        expected = decoder_layer_reference(text, visual, cls, p)
        np.testing.assert_allclose(decoder_layer(text, visual, cls, p), expected, atol=1e-12)

    def test_random_case_matches_reference(self):
        rng = np.random.default_rng(5)
        text = rng.standard_normal((4, 6))
        visual = rng.standard_normal((9, 6))
        cls = rng.standard_normal(3)
        p = layer_params(C=6, cls_dim=3, rng=rng, identity=False)
        expected = decoder_layer_reference(text, visual, cls, p)
        np.testing.assert_allclose(decoder_layer(text, visual, cls, p), expected, atol=1e-10)

    def test_attention_rows_sum_to_one_pre_gate(self):
        rng = np.random.default_rng(6)
        text = rng.standard_normal((3, 4))
        visual = rng.standard_normal((6, 4))
        cls = rng.standard_normal(2)
        p = layer_params(C=4, cls_dim=2, rng=rng, identity=False)
        _, cache = decoder_layer_cached(text, visual, cls, p)
        np.testing.assert_allclose(cache.attn.sum(axis=1), 1.0, atol=1e-12)
        assert (cache.gated.sum(axis=1) <= 1.0 + 1e-12).all()
        assert (cache.gate > 0).all() and (cache.gate < 1).all()

    def test_logit_shift_invariance(self):
        # adding a constant to every score in a row leaves the softmax alone
        rng = np.random.default_rng(7)
        S = rng.standard_normal((4, 6))
        np.testing.assert_allclose(
            softmax_rows(S), softmax_rows(S + 123.456), atol=1e-12
        )
        from affseg.decoder import _row_softmax

        np.testing.assert_allclose(_row_softmax(S), _row_softmax(S + 123.456), atol=1e-12)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_input_raises(self):
        text = np.array([[np.inf, 0.0]])
        visual = np.ones((2, 2))
        p = layer_params(C=2, cls_dim=2, identity=True)
        with pytest.raises(ArithmeticError):
            decoder_layer(text, visual, np.zeros(2), p)


class TestDecode:
    def test_zero_layers_identity(self):
        rng = np.random.default_rng(8)
        text = rng.standard_normal((3, 4))
        out = decode(text, rng.standard_normal((5, 4)), rng.standard_normal(2), DecoderParams())
        np.testing.assert_array_equal(out, text)

    def test_two_layers_compose(self):
        rng = np.random.default_rng(9)
        text = rng.standard_normal((3, 4))
        visual = rng.standard_normal((5, 4))
        cls = rng.standard_normal(2)
        dp = DecoderParams(
            layers=[layer_params(C=4, cls_dim=2, rng=rng, identity=False) for _ in range(2)]
        )
        step1 = decoder_layer(text, visual, cls, dp.layers[0])
        step2 = decoder_layer(step1, visual, cls, dp.layers[1])
        np.testing.assert_array_equal(decode(text, visual, cls, dp), step2)

    def test_permutation_invariance_any_depth(self):
        rng = np.random.default_rng(10)
        text = rng.standard_normal((2, 4))
        visual = rng.standard_normal((6, 4))
        cls = rng.standard_normal(3)
        for t in (0, 1, 3):
            dp = DecoderParams(
                layers=[layer_params(C=4, cls_dim=3, rng=rng, identity=False) for _ in range(t)]
            )
            perm = rng.permutation(6)
            np.testing.assert_allclose(
                decode(text, visual[perm], cls, dp),
                decode(text, visual, cls, dp),
                atol=1e-10,
            )

    def test_gradients_match_finite_differences(self):
        # oracle: finite-difference oracle, t=2, N=3, L=4, C=8
        rng = np.random.default_rng(11)
        C = 8
        text = rng.standard_normal((3, C))
        visual = rng.standard_normal((4, C))
        cls = rng.standard_normal(5)
        dp = DecoderParams(
            layers=[layer_params(C=C, cls_dim=5, rng=rng, identity=False) for _ in range(2)]
        )
        probe = rng.standard_normal((3, C))

        def loss():
            return float((decode(text, visual, cls, dp) * probe).sum())

        arrays = []
        for layer in dp.layers:
            arrays += [layer.wq, layer.wk, layer.wv, layer.wc,
                       layer.w1, layer.b1, layer.w2, layer.b2]
        fd = central_difference(loss, arrays)

        _, caches = decode_cached(text, visual, cls, dp)
        grads, _, _ = decode_backward(caches, probe)
        analytic = []
        for g in grads:
            analytic += [g["wq"], g["wk"], g["wv"], g["wc"], g["w1"], g["b1"], g["w2"], g["b2"]]
        worst = max(max_rel_err(a, n) for a, n in zip(analytic, fd))
        assert worst < 1e-4


class TestPredict:
    def test_zero_text_gives_half_everywhere(self):
        rng = np.random.default_rng(12)
        visual = rng.standard_normal((4, 5))
        pred = predict(visual, np.zeros((3, 5)), grid=(2, 2), image_size=(6, 6))
        np.testing.assert_array_equal(pred.upsampled, np.full((6, 6, 3), 0.5))

    def test_orthonormal_row_selectivity(self):
        visual = np.eye(4)  # 4 orthonormal patch rows
        text_out = visual[:1]
        pred = predict(visual, text_out, grid=(2, 2), image_size=(2, 2))
        np.testing.assert_allclose(pred.logits[:, 0], [1.0, 0.0, 0.0, 0.0], atol=1e-15)

    def test_corner_pixels_exact_under_align_corners(self):
        # oracle: closed-form bilinear oracle on a 2x2 -> 4x4 upsample
        rng = np.random.default_rng(13)
        visual = rng.standard_normal((4, 3))
        text_out = rng.standard_normal((2, 3))
        pred = predict(visual, text_out, grid=(2, 2), image_size=(4, 4))
        logits_grid = (visual @ text_out.T).reshape(2, 2, 2)
        expected = 1.0 / (1.0 + np.exp(-bilinear_reference(logits_grid, 4, 4)))
        np.testing.assert_allclose(pred.upsampled, expected, atol=1e-12)
        for (r, c), (pr, pc) in [((0, 0), (0, 0)), ((0, 3), (0, 1)),
                                 ((3, 0), (1, 0)), ((3, 3), (1, 1))]:
            want = 1.0 / (1.0 + math.exp(-logits_grid[pr, pc, 0]))
            assert abs(pred.upsampled[r, c, 0] - want) < 1e-15

    def test_argmax_invariant_to_positive_rescaling(self):
        rng = np.random.default_rng(14)
        visual = rng.standard_normal((6, 4))
        text_out = rng.standard_normal((3, 4))
        a = predict(visual, text_out, grid=(2, 3), image_size=(4, 6))
        b = predict(3.7 * visual, text_out, grid=(2, 3), image_size=(4, 6))
        np.testing.assert_array_equal(
            a.logits.argmax(axis=1), b.logits.argmax(axis=1)
        )

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            predict(np.zeros((4, 2)), np.zeros((1, 2)), grid=(3, 2), image_size=(4, 4))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(15)
        visual = rng.standard_normal((4, 3))
        text_out = rng.standard_normal((2, 3))
        probe = rng.standard_normal((5, 7, 2))

        def loss():
            p = predict(visual, text_out, grid=(2, 2), image_size=(5, 7))
            return float((p.upsampled * probe).sum())

        fd = central_difference(loss, [visual, text_out])
        _, cache = predict_cached(visual, text_out, (2, 2), (5, 7))
        d_vis, d_txt = predict_backward(cache, probe)
        assert max_rel_err(d_vis, fd[0]) < 1e-4
        assert max_rel_err(d_txt, fd[1]) < 1e-4


def test_init_decoder_shapes():
    dp = init_decoder(2, 8, 12, seed=0)
    assert dp.depth == 2
    assert dp.layers[0].wc.shape == (12, 8)
    assert dp.layers[0].w1.shape == (8, 32)
