"""Tensor-core contracts: seeded sampling, im2col/col2im, reductions."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from addernet.tensor import (RngState, col2im, col2im_batch, conv_output_hw,
                             im2col, im2col_batch, rand_permutation,
                             rand_uniform, randn_seeded, reduce_l2_norm)


class TestSeededSampling:
    def test_same_seed_bitwise_identical(self):
        a = randn_seeded(RngState(42), (3, 5), mean=1.0, stddev=2.0)
        b = randn_seeded(RngState(42), (3, 5), mean=1.0, stddev=2.0)
        assert np.array_equal(a, b)

    def test_golden_stream_pinned(self):
        # regression pin for cross-platform stream stability
        v = randn_seeded(RngState(42), (4,))
        expected = [-0.1382191562592694, 0.7608421084500517,
                    -1.0681848857552723, 1.5891080454601354]
        np.testing.assert_array_equal(v, expected)
        u = rand_uniform(RngState(42), (4,))
        np.testing.assert_array_equal(
            u, [0.7415648787718233, 0.1599103928769201,
                0.27860113025513866, 0.34419071652363753])
        assert rand_permutation(RngState(42), 8).tolist() == [3, 1, 6, 2, 4, 0, 7, 5]

    def test_zero_stddev_is_constant(self):
        v = randn_seeded(RngState(0), (100,), mean=3.5, stddev=0.0)
        assert np.all(v == 3.5)

    def test_law_of_large_numbers(self):
        v = randn_seeded(RngState(7), (10 ** 6,), mean=0.0, stddev=10.0)
        assert 9.9 <= v.std() <= 10.1
        assert abs(v.mean()) < 0.1

    def test_distinct_seeds_differ(self):
        a = randn_seeded(RngState(1), (64,))
        b = randn_seeded(RngState(2), (64,))
        assert not np.array_equal(a, b)

    def test_stream_advances(self):
        rng = RngState(5)
        a = randn_seeded(rng, (8,))
        b = randn_seeded(rng, (8,))
        assert not np.array_equal(a, b)
        assert rng.counter > 0

    @pytest.mark.parametrize("shape", [(0,), (3, 0), (-1,), (2, -2)])
    def test_invalid_shape_rejected(self, shape):
        with pytest.raises(ValueError):
            randn_seeded(RngState(0), shape)

    def test_negative_stddev_rejected(self):
        with pytest.raises(ValueError):
            randn_seeded(RngState(0), (3,), stddev=-1.0)

    def test_permutation_is_permutation(self):
        perm = rand_permutation(RngState(3), 100)
        assert sorted(perm.tolist()) == list(range(100))

    def test_no_nan_from_sampling(self):
        v = randn_seeded(RngState(11), (10000,))
        assert np.all(np.isfinite(v))


class TestIm2col:
    def test_1x1_kernel_identity(self):
        x = randn_seeded(RngState(0), (4, 5, 3))
        cols = im2col(x, kernel=1)
        np.testing.assert_array_equal(cols, x.reshape(20, 3))

    def test_hand_enumerated_windows(self):
        # 3x3 single-channel input, 2x2 kernel, stride 1 -> 4 rows of 4
        x = np.arange(9, dtype=np.float64).reshape(3, 3, 1)
        cols = im2col(x, kernel=2)
        assert cols.shape == (4, 4)
        np.testing.assert_array_equal(cols[0], [0, 1, 3, 4])  # top-left window
        np.testing.assert_array_equal(cols[1], [1, 2, 4, 5])
        np.testing.assert_array_equal(cols[2], [3, 4, 6, 7])
        np.testing.assert_array_equal(cols[3], [4, 5, 7, 8])

    def test_padding_is_zero_fill(self):
        x = np.ones((1, 1, 1))
        cols = im2col(x, kernel=3, padding=1)
        assert cols.shape == (1, 9)
        assert cols[0, 4] == 1.0
        assert cols.sum() == 1.0

    def test_kernel_too_large_rejected(self):
        with pytest.raises(ValueError):
            im2col(np.ones((3, 3, 1)), kernel=5)

    def test_adjoint_identity_random_shapes(self):
        # <M, im2col(X)> == <col2im(M), X> over many geometries
        rng = RngState(99)
        shapes = rand_uniform(rng, (100, 6))
        for row in shapes:
            h = 3 + int(row[0] * 8)
            w = 3 + int(row[1] * 8)
            c = 1 + int(row[2] * 3)
            k = 1 + int(row[3] * min(3, h - 1, w - 1))
            s = 1 + int(row[4] * 2)
            q = int(row[5] * 2)
            x = randn_seeded(rng, (h, w, c))
            cols = im2col(x, k, s, q)
            m = randn_seeded(rng, cols.shape)
            lhs = float((m * cols).sum())
            rhs = float((col2im(m, x.shape, k, s, q) * x).sum())
            assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(lhs))

    def test_batch_matches_stacked_singles(self):
        rng = RngState(4)
        x = randn_seeded(rng, (3, 6, 5, 2))
        batched = im2col_batch(x, 3, stride=2, padding=1)
        singles = np.vstack([im2col(x[i], 3, 2, 1) for i in range(3)])
        np.testing.assert_array_equal(batched, singles)

    def test_output_geometry(self):
        assert conv_output_hw(32, 32, 5, 1, 0) == (28, 28)
        assert conv_output_hw(5, 5, 5, 1, 0) == (1, 1)
        assert conv_output_hw(4, 4, 2, 2, 0) == (2, 2)

    @given(st.integers(3, 7), st.integers(3, 7), st.integers(1, 3),
           st.integers(1, 3), st.data())
    @settings(max_examples=40, deadline=None)
    def test_adjoint_property(self, h, w, c, k, data):
        k = min(k, h, w)
        seed = data.draw(st.integers(0, 2 ** 31))
        rng = RngState(seed)
        x = randn_seeded(rng, (h, w, c))
        cols = im2col(x, k)
        m = randn_seeded(rng, cols.shape)
        lhs = float((m * cols).sum())
        rhs = float((col2im(m, x.shape, k) * x).sum())
        assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(lhs))


class TestReduceL2Norm:
    def test_zero_tensor(self):
        assert reduce_l2_norm(np.zeros((3, 4))) == 0.0

    def test_three_four_five(self):
        assert reduce_l2_norm(np.array([3.0, 4.0])) == pytest.approx(5.0)

    def test_ones(self):
        assert reduce_l2_norm(np.ones(4)) == pytest.approx(2.0)

    def test_positive_for_nonzero(self):
        v = randn_seeded(RngState(0), (17,))
        assert reduce_l2_norm(v) > 0.0
