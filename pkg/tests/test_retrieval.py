"""Mask retrieval: shuffle oracle, threshold equivalence, resize, heads."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridlang.retrieval import (assemble_mask, bilinear_resize,
                                binarize_and_resize, pixel_shuffle,
                                predict_depth, predict_normals, retrieve,
                                space_to_depth)
from gridlang.tensor import Tensor


def shuffle_oracle(s: np.ndarray) -> np.ndarray:
    """Nested-loop reference: channel i fills sub-cell (i//N, i%N)."""
    n2, hp, wp = s.shape
    n = int(round(math.sqrt(n2)))
    out = np.zeros((hp * n, wp * n), dtype=s.dtype)
    for c in range(n2):
        r, q = divmod(c, n)
        for y in range(hp):
            for x in range(wp):
                out[y * n + r, x * n + q] = s[c, y, x]
    return out


class TestPixelShuffle:
    @pytest.mark.parametrize("n,hp,wp", [(1, 8, 8), (2, 8, 8), (4, 8, 8),
                                         (5, 3, 3), (4, 2, 6)])
    def test_matches_nested_loop_oracle_exactly(self, n, hp, wp):
        s = np.random.default_rng(n).normal(size=(n * n, hp, wp))
        np.testing.assert_array_equal(pixel_shuffle(s), shuffle_oracle(s))

    def test_space_to_depth_inverts(self):
        s = np.random.default_rng(0).normal(size=(16, 8, 8))
        np.testing.assert_array_equal(space_to_depth(pixel_shuffle(s), 4), s)

    def test_non_square_channel_count_rejected(self):
        with pytest.raises(ValueError):
            pixel_shuffle(np.zeros((3, 4, 4)))

    def test_tensor_path_matches_numpy(self):
        s = np.random.default_rng(1).normal(size=(4, 5, 6)).astype(np.float32)
        out = pixel_shuffle(Tensor(s, requires_grad=True))
        np.testing.assert_array_equal(out.data, pixel_shuffle(s))
        out.sum().backward()  # differentiable end to end


class TestRetrieve:
    def test_matches_manual_dot_products(self):
        rng = np.random.default_rng(2)
        q = rng.normal(size=(3, 8))
        h_v = rng.normal(size=(4, 5, 8))
        s = retrieve(q, h_v)
        assert s.shape == (3, 4, 5)
        for i in range(3):
            for y in range(4):
                for x in range(5):
                    want = q[i] @ h_v[y, x] / math.sqrt(8)
                    assert s[i, y, x] == pytest.approx(want, rel=1e-6)

    def test_tensor_and_numpy_agree(self):
        rng = np.random.default_rng(3)
        q = rng.normal(size=(2, 16)).astype(np.float32)
        h_v = rng.normal(size=(8, 8, 16)).astype(np.float32)
        s_np = retrieve(q, h_v)
        s_t = retrieve(Tensor(q, requires_grad=True), Tensor(h_v))
        np.testing.assert_allclose(s_np, s_t.data, rtol=1e-5)


class TestThresholdEquivalence:
    @given(st.floats(-50, 50).filter(lambda s: abs(s) > 1e-9))
    @settings(max_examples=300, deadline=None)
    def test_sign_indicator_equals_sigmoid_half(self, s):
        sigma = 1.0 / (1.0 + math.exp(-s))
        assert (s > 0) == (sigma > 0.5)

    def test_binarize_and_resize_orders_sigmoid_first(self):
        # scores -10 and +10 average to 0 -> sigmoid first gives 0.5, not
        # sigmoid(0); a half-half cell must land exactly on the boundary
        s_up = np.array([[-10.0, 10.0], [-10.0, 10.0]])
        bm = binarize_and_resize(s_up, (1, 1))
        assert bm.probs[0, 0] == pytest.approx(0.5, abs=1e-4)
        assert not bm.mask[0, 0]  # strictly-greater threshold


class TestBilinearResize:
    def test_identity_at_same_size(self):
        img = np.random.default_rng(4).normal(size=(6, 7))
        np.testing.assert_allclose(bilinear_resize(img, (6, 7)), img,
                                   atol=1e-12)

    def test_constant_preserved(self):
        img = np.full((5, 5), 3.25)
        out = bilinear_resize(img, (16, 11))
        np.testing.assert_allclose(out, 3.25)

    def test_2x_upsample_midpoints(self):
        img = np.array([[0.0, 1.0]])
        out = bilinear_resize(img, (1, 4))
        # pixel centers at 0.25, 0.75, 1.25, 1.75 of a 2-wide source
        np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0])

    def test_range_never_exceeded(self):
        img = np.random.default_rng(5).random((9, 9))
        out = bilinear_resize(img, (30, 13))
        assert out.min() >= img.min() - 1e-12
        assert out.max() <= img.max() + 1e-12


class TestMaskAssembly:
    def test_strong_positive_queries_fill_mask(self):
        d = 16
        h_v = np.ones((8, 8, d))
        queries = np.ones((4, d))
        bm = assemble_mask(queries, h_v, (64, 64))
        assert bm.mask.all()

    def test_opposing_queries_give_empty(self):
        d = 16
        h_v = np.ones((8, 8, d))
        bm = assemble_mask(-np.ones((4, d)), h_v, (64, 64))
        assert not bm.mask.any()


class TestDenseHeads:
    def test_depth_maps_sigmoid_to_range(self):
        d = 8
        h_v = np.zeros((4, 4, d))
        e = np.zeros(d)
        out = predict_depth(e, h_v, 2.0, 6.0)
        np.testing.assert_allclose(out, 4.0)  # sigmoid(0)=0.5 -> midpoint

    def test_depth_saturates_to_bounds(self):
        d = 4
        h_v = np.ones((2, 2, d)) * 50
        out_hi = predict_depth(np.ones(d), h_v, 0.0, 1.0)
        out_lo = predict_depth(-np.ones(d), h_v, 0.0, 1.0)
        np.testing.assert_allclose(out_hi, 1.0, atol=1e-6)
        np.testing.assert_allclose(out_lo, 0.0, atol=1e-6)

    def test_normals_unit_norm_everywhere(self):
        rng = np.random.default_rng(6)
        h_v = rng.normal(size=(8, 8, 12))
        e = rng.normal(size=(3, 12))
        out = predict_normals(e, h_v, size=(32, 32))
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0,
                                   atol=1e-6)

    def test_degenerate_normals_fall_back_to_plus_z(self):
        h_v = np.zeros((2, 2, 4))
        e = np.zeros((3, 4))  # every channel sigmoid(0) -> 2*0.5-1 = 0 vector
        out = predict_normals(e, h_v)
        np.testing.assert_allclose(out[..., 2], 1.0)
