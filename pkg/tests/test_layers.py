"""Layer rules: hand-computed cases, surrogate-gradient conventions,
finite-difference checks, and the squared-distance/conv identity."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from addernet import kernels
from addernet import layers as L
from addernet.analysis import finite_diff_check
from addernet.tensor import RngState, im2col_batch, randn_seeded


def scalar_adder(f_val, p):
    return L.AdderLayerParams(np.full((1, 1, 1, 1), f_val), 1, p=p)


class TestAdderForward:
    def test_exact_match_gives_zero(self):
        filters = randn_seeded(RngState(0), (2, 2, 3, 1))
        params = L.AdderLayerParams(filters, 2, p=1.0)
        x = filters[:, :, :, 0]  # the single patch equals the template
        y = L.adder_forward(params, x)
        assert y.shape == (1, 1, 1)
        assert y[0, 0, 0] == 0.0

    def test_p1_scalar(self):
        y = L.adder_forward(scalar_adder(1.0, 1.0), np.array([[[3.0]]]))
        assert y[0, 0, 0] == -2.0

    def test_p2_patch(self):
        params = L.AdderLayerParams(np.zeros((1, 1, 2, 1)), 1, p=2.0)
        y = L.adder_forward(params, np.array([[[1.0, -2.0]]]))
        assert y[0, 0, 0] == pytest.approx(-5.0)

    def test_fractional_p_value(self):
        y = L.adder_forward(scalar_adder(1.0, 1.5), np.array([[[3.0]]]))
        assert y[0, 0, 0] == pytest.approx(-(2.0 ** 1.5), rel=1e-12)

    def test_channel_mismatch_rejected(self):
        params = L.AdderLayerParams(np.zeros((1, 1, 2, 1)), 1)
        with pytest.raises(ValueError):
            L.adder_forward(params, np.zeros((3, 3, 3)))

    def test_window_fit_rejected(self):
        params = L.AdderLayerParams(np.zeros((5, 5, 1, 1)), 5)
        with pytest.raises(ValueError):
            L.adder_forward(params, np.zeros((3, 3, 1)))

    def test_invalid_p_rejected(self):
        with pytest.raises(ValueError):
            scalar_adder(0.0, 2.5)

    @given(st.integers(0, 2 ** 31), st.floats(1.0, 2.0))
    @settings(max_examples=30, deadline=None)
    def test_output_never_positive(self, seed, p):
        rng = RngState(seed)
        params = L.AdderLayerParams(randn_seeded(rng, (2, 2, 2, 3)), 2, p=p)
        x = randn_seeded(rng, (4, 4, 2)) * 3.0
        assert np.all(L.adder_forward(params, x) <= 0.0)


class TestAdderGradients:
    def test_zero_gradient_at_exact_match(self):
        filters = randn_seeded(RngState(3), (2, 2, 2, 1))
        params = L.AdderLayerParams(filters, 2, p=1.0)
        x = filters[:, :, :, 0]
        up = np.ones((1, 1, 1))
        for mode in L.GradientMode:
            g = L.adder_grad_filters(params, x, up, mode=mode)
            assert np.all(g == 0.0)

    def test_full_precision_hand_case(self):
        g = L.adder_grad_filters(scalar_adder(1.0, 1.0), np.array([[[3.0]]]),
                                 np.array([[[1.0]]]))
        assert g.reshape(()) == 2.0

    def test_sign_hand_case(self):
        g = L.adder_grad_filters(scalar_adder(1.0, 1.0), np.array([[[3.0]]]),
                                 np.array([[[1.0]]]), mode=L.GradientMode.SIGN)
        assert g.reshape(()) == 1.0

    def test_sign_values_pre_weighting(self):
        # with unit upstream on a single output position, sign-mode entries
        # must land exactly in {-1, 0, +1}
        rng = RngState(5)
        filters = randn_seeded(rng, (2, 2, 3, 4))
        params = L.AdderLayerParams(filters, 2, p=1.0)
        x = randn_seeded(rng, (2, 2, 3))
        x[0, 0, 0] = filters[0, 0, 0, 1]  # force one exact tie
        up = np.zeros((1, 1, 4))
        up[0, 0, 1] = 1.0
        g = L.adder_grad_filters(params, x, up, mode=L.GradientMode.SIGN)
        assert set(np.unique(g)).issubset({-1.0, 0.0, 1.0})
        assert g[0, 0, 0, 1] == 0.0  # sgn(0) = 0

    def test_input_grad_hand_cases(self):
        cases = [
            (2.0, -2.0),                   # p=2: F - X = -2
            (1.0, -1.0),                   # p=1: sgn(F - X)
            (1.5, -(2.0 ** 0.5)),          # signed magnitude convention
        ]
        for p, expected in cases:
            g = L.adder_grad_input(scalar_adder(1.0, p), np.array([[[3.0]]]),
                                   np.array([[[1.0]]]))
            assert g.reshape(()) == pytest.approx(expected, rel=1e-12)

    def test_upstream_shape_mismatch_rejected(self):
        params = L.AdderLayerParams(randn_seeded(RngState(0), (2, 2, 1, 3)), 2)
        x = randn_seeded(RngState(1), (4, 4, 1))
        with pytest.raises(ValueError):
            L.adder_grad_filters(params, x, np.ones((2, 2, 3)))

    def test_p2_gradients_are_half_the_true_ones(self):
        # finite differences recover exactly twice the surrogate at p=2
        rng = RngState(17)
        x = randn_seeded(rng, (1, 4, 4, 2))
        params = L.AdderLayerParams(randn_seeded(rng, (3, 3, 2, 3)), 3, p=2.0)
        up = randn_seeded(rng, (1, 2, 2, 3))
        g_f = L.adder_grad_filters(params, x, up)
        g_x = L.adder_grad_input(params, x, up)
        report = finite_diff_check(
            lambda: float((L.adder_forward(params, x) * up).sum()),
            [params.filters, x], [2.0 * g_f, 2.0 * g_x], RngState(0),
            tolerance=1e-5, max_coords_per_param=50)
        assert report.passed, report

    def test_p1_input_grad_is_true_subgradient_off_kinks(self):
        rng = RngState(23)
        for _ in range(5):
            x = randn_seeded(rng, (1, 4, 4, 1)) * 2.0
            f = randn_seeded(rng, (2, 2, 1, 2)) * 2.0
            cols = im2col_batch(x, 2)
            if np.abs(cols[:, :, None] - f.reshape(-1, 2)[None]).min() < 1e-3:
                continue
            params = L.AdderLayerParams(f, 2, p=1.0)
            up = randn_seeded(rng, (1, 3, 3, 2))
            g_x = L.adder_grad_input(params, x, up)
            report = finite_diff_check(
                lambda: float((L.adder_forward(params, x) * up).sum()),
                [x], [g_x], RngState(1), tolerance=1e-5, max_coords_per_param=40)
            assert report.passed, report


class TestConv:
    def test_identity_filter(self):
        x = randn_seeded(RngState(0), (4, 4, 1))
        params = L.ConvLayerParams(np.ones((1, 1, 1, 1)), 1)
        np.testing.assert_array_equal(L.conv_forward(params, x), x)

    def test_hand_dot_product(self):
        params = L.ConvLayerParams(np.array([3.0, 4.0]).reshape(1, 1, 2, 1), 1)
        y = L.conv_forward(params, np.array([[[1.0, 2.0]]]))
        assert y[0, 0, 0] == 11.0

    def test_zero_filter(self):
        params = L.ConvLayerParams(np.zeros((2, 2, 2, 3)), 2)
        y = L.conv_forward(params, randn_seeded(RngState(1), (5, 5, 2)))
        assert np.all(y == 0.0)

    def test_scalar_grad_case(self):
        params = L.ConvLayerParams(np.full((1, 1, 1, 1), 2.0), 1)
        d_f, d_x = L.conv_grad(params, np.array([[[5.0]]]), np.array([[[1.0]]]))
        assert d_f.reshape(()) == 5.0
        assert d_x.reshape(()) == 2.0

    def test_zero_upstream(self):
        rng = RngState(2)
        params = L.ConvLayerParams(randn_seeded(rng, (3, 3, 2, 4)), 3)
        x = randn_seeded(rng, (5, 5, 2))
        d_f, d_x = L.conv_grad(params, x, np.zeros((3, 3, 4)))
        assert np.all(d_f == 0.0) and np.all(d_x == 0.0)

    def test_finite_difference_random_layers(self):
        rng = RngState(31)
        for _ in range(10):
            x = randn_seeded(rng, (2, 5, 5, 2))
            params = L.ConvLayerParams(randn_seeded(rng, (3, 3, 2, 3)), 3,
                                       stride=2, padding=1)
            up = randn_seeded(rng, (2, 3, 3, 3))
            d_f, d_x = L.conv_grad(params, x, up)
            report = finite_diff_check(
                lambda: float((L.conv_forward(params, x) * up).sum()),
                [params.filters, x], [d_f, d_x], rng, tolerance=1e-5,
                max_coords_per_param=10)
            assert report.passed, report


class TestBatchNorm:
    def test_standardized_batch_is_fixed_point(self):
        rng = RngState(0)
        x = randn_seeded(rng, (512, 4))
        x = (x - x.mean(axis=0)) / x.std(axis=0)
        bn = L.init_bn_params(4, eps=1e-12)
        y = L.bn_forward(bn, x, training=True)
        np.testing.assert_allclose(y, x, atol=1e-6)

    def test_two_point_batch(self):
        bn = L.init_bn_params(1, eps=1e-15)
        y = L.bn_forward(bn, np.array([[1.0], [3.0]]), training=True)
        np.testing.assert_allclose(y.ravel(), [-1.0, 1.0], atol=1e-7)

    def test_zero_gamma_gives_beta(self):
        bn = L.init_bn_params(3)
        bn.gamma[:] = 0.0
        bn.beta[:] = [1.0, 2.0, 3.0]
        y = L.bn_forward(bn, randn_seeded(RngState(1), (8, 3)), training=True)
        np.testing.assert_allclose(y, np.tile([1.0, 2.0, 3.0], (8, 1)))

    def test_train_mode_normalizes(self):
        rng = RngState(2)
        bn = L.init_bn_params(5)
        bn.gamma[:] = 2.0
        bn.beta[:] = -1.0
        y = L.bn_forward(bn, randn_seeded(rng, (2048, 5)) * 3.0 + 7.0, training=True)
        np.testing.assert_allclose(y.mean(axis=0), -1.0, atol=1e-10)
        np.testing.assert_allclose(y.std(axis=0), 2.0, atol=1e-3)

    def test_single_sample_train_rejected(self):
        bn = L.init_bn_params(3)
        with pytest.raises(ValueError):
            L.bn_forward(bn, np.ones((1, 3)), training=True)

    def test_eval_uses_running_stats(self):
        bn = L.init_bn_params(2)
        bn.running_mean[:] = [1.0, -1.0]
        bn.running_var[:] = [4.0, 9.0]
        y = L.bn_forward(bn, np.array([[3.0, 2.0]]), training=False)
        np.testing.assert_allclose(y, [[1.0, 1.0]], atol=1e-5)

    def test_running_stats_update(self):
        bn = L.init_bn_params(1, momentum=0.5)
        L.bn_forward(bn, np.array([[2.0], [4.0]]), training=True)
        assert bn.running_mean[0] == pytest.approx(1.5)

    def test_constant_upstream_kills_input_grad(self):
        rng = RngState(3)
        bn = L.init_bn_params(4)
        x = randn_seeded(rng, (32, 4))
        dx, _, _ = L.bn_backward(bn, x, np.ones((32, 4)))
        assert np.abs(dx).max() < 1e-9

    def test_zero_upstream_zero_grads(self):
        bn = L.init_bn_params(2)
        dx, dg, db = L.bn_backward(bn, randn_seeded(RngState(4), (8, 2)),
                                   np.zeros((8, 2)))
        assert np.all(dx == 0) and np.all(dg == 0) and np.all(db == 0)

    def test_finite_difference(self):
        rng = RngState(41)
        for _ in range(5):
            x = randn_seeded(rng, (8, 3)) * 2.0
            bn = L.init_bn_params(3)
            bn.gamma[:] = randn_seeded(rng, (3,)) + 1.5
            bn.beta[:] = randn_seeded(rng, (3,))
            up = randn_seeded(rng, (8, 3))
            dx, dg, db = L.bn_backward(bn, x, up)
            report = finite_diff_check(
                lambda: float((L.bn_forward(bn, x, True, update_running=False)
                               * up).sum()),
                [x, bn.gamma, bn.beta], [dx, dg, db], rng,
                tolerance=1e-5, max_coords_per_param=12)
            assert report.passed, report


class TestReluAndPooling:
    def test_forward_values(self):
        np.testing.assert_array_equal(L.relu(np.array([-1.0, 0.0, 2.0])),
                                      [0.0, 0.0, 2.0])

    def test_dead_unit_blocks_upstream(self):
        assert L.relu(np.array([-1.0]), np.array([7.0]))[0] == 0.0

    def test_subgradient_at_zero_is_zero(self):
        assert L.relu(np.array([0.0]), np.array([7.0]))[0] == 0.0

    def test_finite_difference_off_kink(self):
        rng = RngState(8)
        x = randn_seeded(rng, (5, 5))
        x = np.where(np.abs(x) < 0.05, x + 0.2, x)
        up = randn_seeded(rng, (5, 5))
        report = finite_diff_check(lambda: float((L.relu(x) * up).sum()),
                                   [x], [L.relu(x, up)], rng, tolerance=1e-6,
                                   max_coords_per_param=25)
        assert report.passed, report

    def test_maxpool_forward_backward(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
        y, switches = L.maxpool2_forward(x)
        np.testing.assert_array_equal(y.ravel(), [5, 7, 13, 15])
        up = np.ones_like(y)
        dx = L.maxpool2_backward(switches, up, x.shape)
        assert dx.sum() == 4.0
        assert dx[0, 1, 1, 0] == 1.0 and dx[0, 0, 0, 0] == 0.0

    def test_maxpool_tie_is_deterministic(self):
        x = np.zeros((1, 2, 2, 1))
        y, switches = L.maxpool2_forward(x)
        assert switches.ravel()[0] == 0  # first position wins ties

    def test_avgpool_roundtrip(self):
        x = randn_seeded(RngState(9), (2, 4, 4, 3))
        y = L.avgpool2_forward(x)
        np.testing.assert_allclose(y[0, 0, 0], x[0, :2, :2].mean(axis=(0, 1)))
        dx = L.avgpool2_backward(np.ones_like(y), x.shape)
        assert dx.shape == x.shape
        np.testing.assert_allclose(dx, 0.25)


class TestLosses:
    def test_uniform_logits_give_log_k(self):
        for k in (2, 5, 10):
            loss, _ = L.softmax_cross_entropy(np.zeros((3, k)), np.zeros(3, int))
            assert loss == pytest.approx(np.log(k), rel=1e-12)

    def test_confident_logit_saturates(self):
        logits = np.zeros((1, 10))
        logits[0, 4] = 50.0
        loss, _ = L.softmax_cross_entropy(logits, np.array([4]))
        assert 0.0 <= loss < 1e-20

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            L.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_softmax_finite_difference(self):
        rng = RngState(12)
        logits = randn_seeded(rng, (6, 4)) * 2.0
        labels = np.array([0, 1, 2, 3, 0, 1])
        loss, grad = L.softmax_cross_entropy(logits, labels)
        report = finite_diff_check(
            lambda: L.softmax_cross_entropy(logits, labels)[0],
            [logits], [grad], rng, tolerance=1e-6, max_coords_per_param=24)
        assert report.passed, report

    def test_bce_symmetry_point(self):
        loss, grad = L.sigmoid_bce(np.array([0.0]), np.array([1]))
        assert loss == pytest.approx(np.log(2.0), rel=1e-12)
        assert grad[0] == pytest.approx(-0.5)

    def test_bce_saturation(self):
        loss, _ = L.sigmoid_bce(np.array([50.0]), np.array([1]))
        assert 0.0 < loss < 1e-20

    def test_bce_nonbinary_label_rejected(self):
        with pytest.raises(ValueError):
            L.sigmoid_bce(np.array([0.0]), np.array([2]))

    def test_bce_finite_difference(self):
        rng = RngState(13)
        z = randn_seeded(rng, (10,)) * 3.0
        y = (randn_seeded(rng, (10,)) > 0).astype(int)
        loss, grad = L.sigmoid_bce(z, y)
        report = finite_diff_check(lambda: L.sigmoid_bce(z, y)[0],
                                   [z], [grad], rng, tolerance=1e-6,
                                   max_coords_per_param=10)
        assert report.passed, report

    def test_grad_scales_with_batch_size(self):
        loss, grad = L.softmax_cross_entropy(np.zeros((4, 2)), np.zeros(4, int))
        assert grad.shape == (4, 2)
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)
        np.testing.assert_allclose(grad[:, 0], (0.5 - 1.0) / 4)


class TestL2ConvIdentity:
    def test_zero_case(self):
        params = L.AdderLayerParams(np.zeros((2, 2, 1, 1)), 2, p=2.0)
        x = np.zeros((3, 3, 1))
        a = L.adder_forward(params, x)
        c = L.conv_forward(L.ConvLayerParams(params.filters, 2), x)
        assert L.l2_adder_conv_residual(a, c, x, params) == 0.0

    def test_scalar_hand_case(self):
        # X=3, F=1: Y_l2=-4, Y_conv=3, |X|^2=9, |F|^2=1 and -4 = 6-9-1
        params = scalar_adder(1.0, 2.0)
        x = np.array([[[3.0]]])
        a = L.adder_forward(params, x)
        c = L.conv_forward(L.ConvLayerParams(params.filters, 1), x)
        assert a.reshape(()) == -4.0 and c.reshape(()) == 3.0
        assert L.l2_adder_conv_residual(a, c, x, params) < 1e-12

    def test_random_configurations(self):
        rng = RngState(77)
        worst = 0.0
        for _ in range(50):
            x = randn_seeded(rng, (5, 5, 3)) * 2.0
            params = L.AdderLayerParams(randn_seeded(rng, (3, 3, 3, 4)), 3, p=2.0)
            a = L.adder_forward(params, x)
            c = L.conv_forward(L.ConvLayerParams(params.filters, 3), x)
            worst = max(worst, L.l2_adder_conv_residual(a, c, x, params))
        assert worst < 1e-9


class TestKernelsAgainstNaiveReference:
    """The fast kernels must agree with direct dense evaluation."""

    @pytest.mark.parametrize("p", [1.0, 1.3, 1.5, 1.9, 2.0])
    def test_forward(self, p):
        rng = RngState(int(p * 100))
        cols = randn_seeded(rng, (64, 18)) * 2.0
        fmat = randn_seeded(rng, (18, 7))
        got = kernels.lp_distance_forward(cols, fmat, p)
        ref = -(np.abs(cols[:, :, None] - fmat[None, :, :]) ** p).sum(axis=1)
        np.testing.assert_allclose(got, ref, rtol=1e-11, atol=1e-11)

    @pytest.mark.parametrize("p", [1.0, 1.4, 2.0])
    def test_grad_input(self, p):
        rng = RngState(int(p * 50) + 1)
        cols = randn_seeded(rng, (40, 12))
        fmat = randn_seeded(rng, (12, 5))
        up = randn_seeded(rng, (40, 5))
        got = kernels.lp_grad_input_cols(cols, fmat, up, p)
        diff = fmat[None, :, :] - cols[:, :, None]
        w = np.sign(diff) * np.abs(diff) ** (p - 1.0)
        ref = np.einsum("rt,rkt->rk", up, w)
        np.testing.assert_allclose(got, ref, rtol=1e-11, atol=1e-12)

    def test_grad_filters_full(self):
        rng = RngState(6)
        cols = randn_seeded(rng, (30, 8))
        fmat = randn_seeded(rng, (8, 4))
        up = randn_seeded(rng, (30, 4))
        got = kernels.lp_grad_filters(cols, fmat, up)
        ref = np.einsum("rt,rkt->kt", up, cols[:, :, None] - fmat[None, :, :])
        np.testing.assert_allclose(got, ref, rtol=1e-11, atol=1e-12)

    def test_grad_filters_sign(self):
        rng = RngState(7)
        cols = randn_seeded(rng, (30, 8))
        fmat = randn_seeded(rng, (8, 4))
        up = randn_seeded(rng, (30, 4))
        got = kernels.lp_grad_filters(cols, fmat, up, sign_mode=True)
        ref = np.einsum("rt,rkt->kt", up,
                        np.sign(cols[:, :, None] - fmat[None, :, :]))
        np.testing.assert_allclose(got, ref, rtol=1e-11, atol=1e-12)
