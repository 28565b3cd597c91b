"""Network assembly, orchestration, op counting, and checkpointing."""

import numpy as np
import pytest

from addernet import netgraph as N
from addernet import layers as L
from addernet.analysis import finite_diff_check
from addernet.tensor import RngState, randn_seeded


def small_conv_spec():
    return N.NetworkSpec((6, 6, 2), [
        N.LayerSpec("conv", out_channels=3, kernel=3),
        N.LayerSpec("bn"), N.LayerSpec("relu"),
        N.LayerSpec("maxpool"),
        N.LayerSpec("flatten"),
        N.LayerSpec("conv", out_channels=3, kernel=1),
        N.LayerSpec("bn")], loss="softmax_ce")


class TestBuild:
    def test_trivial_head_only_network(self):
        spec = N.NetworkSpec((1, 1, 4), [
            N.LayerSpec("conv", out_channels=2, kernel=1), N.LayerSpec("bn")])
        net = N.build_network(spec, RngState(0))
        out, _ = N.forward_pass(net, np.zeros((3, 1, 1, 4)))
        assert out.shape == (3, 2)

    def test_lenet5_bn_parameter_count(self):
        # weighted layers: 5x5x1x6 + 5x5x6x16 + 5x5x16x120 + 120x84 + 84x10
        # = 150 + 2400 + 48000 + 10080 + 840 = 61470 (layers carry no bias;
        # batch norm provides the shift), plus 2*(6+16+120+84+10) = 472 bn.
        net = N.build_network(N.lenet5_bn("adder"), RngState(0))
        weights = sum(r.array.size for r in net.param_refs()
                      if r.kind.endswith("filter"))
        bn = sum(r.array.size for r in net.param_refs()
                 if r.kind.startswith("bn"))
        assert weights == 61470
        assert bn == 472

    def test_same_seed_identical_parameters(self):
        a = N.build_network(N.lenet5_bn("adder"), RngState(9))
        b = N.build_network(N.lenet5_bn("adder"), RngState(9))
        for ra, rb in zip(a.param_refs(), b.param_refs()):
            np.testing.assert_array_equal(ra.array, rb.array)

    def test_shape_inconsistent_spec_rejected(self):
        spec = N.NetworkSpec((3, 3, 1), [
            N.LayerSpec("conv", out_channels=2, kernel=5), N.LayerSpec("bn")])
        with pytest.raises(ValueError):
            N.build_network(spec, RngState(0))

    def test_odd_extent_pooling_rejected(self):
        spec = N.NetworkSpec((3, 3, 1), [N.LayerSpec("maxpool"),
                                         N.LayerSpec("flatten"),
                                         N.LayerSpec("conv", out_channels=2,
                                                     kernel=1),
                                         N.LayerSpec("bn")])
        with pytest.raises(ValueError):
            N.infer_shapes(spec)

    def test_bce_head_needs_single_output(self):
        spec = N.NetworkSpec((1, 1, 2), [
            N.LayerSpec("conv", out_channels=3, kernel=1)], loss="sigmoid_bce")
        with pytest.raises(ValueError):
            N.infer_shapes(spec)

    def test_presets_sandwich_weighted_layers_with_bn(self):
        for spec in (N.lenet5_bn("adder"), N.lenet5_bn("conv"),
                     N.two_layer_classifier(3, "adder"),
                     N.two_layer_classifier(3, "mlp")):
            kinds = [ls.kind for ls in spec.layers]
            for i, kind in enumerate(kinds):
                if kind in ("adder", "conv"):
                    assert kinds[i + 1] == "bn"


class TestForward:
    def test_single_layer_matches_direct_call(self):
        spec = N.NetworkSpec((5, 5, 2), [
            N.LayerSpec("adder", out_channels=3, kernel=3),
            N.LayerSpec("flatten"),
            N.LayerSpec("conv", out_channels=2, kernel=1),
            N.LayerSpec("bn")])
        net = N.build_network(spec, RngState(1), initial_p=1.5)
        x = randn_seeded(RngState(2), (2, 5, 5, 2))
        direct = L.adder_forward(net.layers[0].params, x)
        via_net, _ = net.layers[0].forward(x, training=False)
        np.testing.assert_array_equal(direct, via_net)

    def test_eval_outputs_batch_size_invariant(self):
        net = N.build_network(N.lenet5_bn("adder"), RngState(3), initial_p=1.4)
        x = randn_seeded(RngState(4), (8, 32, 32, 1))
        one, _ = N.forward_pass(net, x[:1], training=False)
        many, _ = N.forward_pass(net, x, training=False)
        np.testing.assert_allclose(one[0], many[0], atol=1e-12)

    def test_zero_batch_through_zero_conv_gives_equal_logits(self):
        spec = small_conv_spec()
        net = N.build_network(spec, RngState(5))
        for layer in net.layers:
            if isinstance(layer, N._ConvLayer):
                layer.params.filters[:] = 0.0
        out, _ = N.forward_pass(net, np.zeros((2, 6, 6, 2)), training=False)
        assert np.ptp(out) == 0.0

    def test_batch_shape_mismatch_rejected(self):
        net = N.build_network(small_conv_spec(), RngState(6))
        with pytest.raises(ValueError):
            N.forward_pass(net, np.zeros((2, 5, 5, 2)))


class TestBackward:
    def test_zero_loss_grad_gives_zero_grads(self):
        net = N.build_network(small_conv_spec(), RngState(7))
        x = randn_seeded(RngState(8), (4, 6, 6, 2))
        out, trace = N.forward_pass(net, x, training=True)
        grads = N.backward_pass(net, trace, np.zeros_like(out))
        assert all(np.all(g == 0.0) for g in grads)

    def test_stale_trace_rejected(self):
        net = N.build_network(small_conv_spec(), RngState(7))
        x = randn_seeded(RngState(8), (2, 6, 6, 2))
        out, trace = N.forward_pass(net, x, training=True)
        trace.caches.pop()
        with pytest.raises(ValueError):
            N.backward_pass(net, trace, np.zeros_like(out))

    def test_conv_network_end_to_end_finite_difference(self):
        net = N.build_network(small_conv_spec(), RngState(10))
        x = randn_seeded(RngState(11), (4, 6, 6, 2))
        y = np.array([0, 1, 2, 0])
        _, grads = N.loss_and_grads(net, x, y, update_running=False)
        report = finite_diff_check(
            lambda: N.loss_and_grads(net, x, y, update_running=False)[0],
            [r.array for r in net.param_refs()], grads, RngState(12),
            tolerance=1e-4, max_coords_per_param=15)
        assert report.passed, report

    def test_adder_p2_network_factor_two(self):
        # single adder layer in the chain: true gradient = 2x surrogate
        spec = N.NetworkSpec((4, 4, 2), [
            N.LayerSpec("adder", out_channels=3, kernel=3),
            N.LayerSpec("bn"), N.LayerSpec("relu"), N.LayerSpec("flatten"),
            N.LayerSpec("conv", out_channels=2, kernel=1), N.LayerSpec("bn")])
        net = N.build_network(spec, RngState(13), initial_p=2.0)
        x = randn_seeded(RngState(14), (4, 4, 4, 2))
        y = np.array([0, 1, 1, 0])
        _, grads = N.loss_and_grads(net, x, y, update_running=False)
        refs = net.param_refs()
        doubled = [2.0 * g if r.kind == "adder_filter" else g
                   for r, g in zip(refs, grads)]
        report = finite_diff_check(
            lambda: N.loss_and_grads(net, x, y, update_running=False)[0],
            [r.array for r in refs], doubled, RngState(15),
            tolerance=1e-4, max_coords_per_param=15)
        assert report.passed, report

    def test_stacked_adder_p2_factor_compounds(self):
        # every parameter's surrogate gradient is scaled down by 2 per adder
        # input-grad crossing above it, plus once for its own filter grad
        spec = N.NetworkSpec((1, 1, 3), [
            N.LayerSpec("adder", out_channels=4, kernel=1),
            N.LayerSpec("bn"), N.LayerSpec("relu"),
            N.LayerSpec("adder", out_channels=2, kernel=1), N.LayerSpec("bn")])
        net = N.build_network(spec, RngState(16), initial_p=2.0)
        x = randn_seeded(RngState(17), (6, 1, 1, 3))
        y = np.array([0, 1, 0, 1, 0, 1])
        _, grads = N.loss_and_grads(net, x, y, update_running=False)
        adder_idx = [i for i, ls in enumerate(spec.layers) if ls.kind == "adder"]

        def factor(ref):
            crossings = sum(1 for i in adder_idx if i > ref.layer_index)
            return 2.0 ** (crossings + (ref.kind == "adder_filter"))

        refs = net.param_refs()
        scaled = [factor(r) * g for r, g in zip(refs, grads)]
        report = finite_diff_check(
            lambda: N.loss_and_grads(net, x, y, update_running=False)[0],
            [r.array for r in refs], scaled, RngState(18),
            tolerance=1e-4, max_coords_per_param=20)
        assert report.passed, report


class TestOpCounts:
    def test_unit_conv(self):
        spec = N.NetworkSpec((1, 1, 1), [
            N.LayerSpec("conv", out_channels=2, kernel=1), N.LayerSpec("bn")])
        report = N.count_ops(spec)
        assert report.rows[0].muls == 2 and report.rows[0].adds == 2

    def test_lenet_conv_total(self):
        report = N.count_ops(N.lenet5_bn("conv"))
        assert report.total_muls == 416520
        assert report.total_adds == 416520
        assert 391_500 <= report.total_muls <= 478_500  # 435K +- 10%

    def test_lenet_adder_total(self):
        conv = N.count_ops(N.lenet5_bn("conv"))
        adder = N.count_ops(N.lenet5_bn("adder"))
        assert adder.total_muls == 0
        assert adder.total_adds == 2 * conv.total_muls
        assert adder.total_xnor == 0

    def test_additive_over_layers(self):
        report = N.count_ops(N.lenet5_bn("conv"))
        assert report.total_muls == sum(r.muls for r in report.rows)

    def test_counts_independent_of_parameters(self):
        # counting works from the spec alone, before any build
        a = N.count_ops(N.lenet5_bn("adder"))
        b = N.count_ops(N.lenet5_bn("adder"))
        assert [(r.muls, r.adds) for r in a.rows] == [(r.muls, r.adds) for r in b.rows]

    def test_first_layer_conv_variant(self):
        mixed = N.count_ops(N.lenet5_bn("adder", first_layer_conv=True))
        assert mixed.rows[0].muls > 0
        assert all(r.muls == 0 for r in mixed.rows[1:])


class TestPredictGrid:
    def test_constant_net_uniform_labels(self):
        net = N.build_network(N.two_layer_classifier(2, "mlp"), RngState(20))
        for layer in net.layers:
            if isinstance(layer, N._BatchNormLayer):
                layer.params.gamma[:] = 0.0
                layer.params.beta[:] = 5.0  # saturated positive logit
        grid = N.predict_grid(net, (-10, 10), 16)
        assert grid.shape == (16, 16)
        assert np.all(grid == 1)

    def test_requires_2d_input_network(self):
        net = N.build_network(small_conv_spec(), RngState(21))
        with pytest.raises(ValueError):
            N.predict_grid(net, (-1, 1), 8)

    def test_row_zero_is_top_of_domain(self):
        # logit = y coordinate: positive label only in the top half
        net = N.build_network(N.two_layer_classifier(1, "mlp"), RngState(22))
        l0 = net.layers[0].params
        l0.filters[:] = 0.0
        l0.filters[0, 0, 1, 0] = 1.0  # hidden = y
        for layer in net.layers[1:]:
            if isinstance(layer, N._BatchNormLayer):
                layer.params.gamma[:] = 1.0
                layer.params.beta[:] = 0.0
                layer.params.running_mean[:] = 0.0
                layer.params.running_var[:] = 1.0
        net.layers[3].params.filters[:] = 1.0
        grid = N.predict_grid(net, (-8, 8), 9)
        assert np.all(grid[0] == 1) and np.all(grid[-1] == 0)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        net = N.build_network(N.lenet5_bn("adder"), RngState(30), initial_p=2.0)
        net.set_p(1.25)
        x = randn_seeded(RngState(31), (4, 32, 32, 1))
        N.loss_and_grads(net, x, np.array([0, 1, 2, 3]))  # move running stats
        path = tmp_path / "net.ckpt"
        N.save_checkpoint(net, path)
        loaded = N.load_checkpoint(path)
        for a, b in zip(net.param_refs(), loaded.param_refs()):
            np.testing.assert_array_equal(a.array, b.array)
        for la, lb in zip(net.layers, loaded.layers):
            if isinstance(la, N._BatchNormLayer):
                np.testing.assert_array_equal(la.params.running_mean,
                                              lb.params.running_mean)
                np.testing.assert_array_equal(la.params.running_var,
                                              lb.params.running_var)
        assert loaded.layers[0].params.p == 1.25
        out_a, _ = N.forward_pass(net, x, training=False)
        out_b, _ = N.forward_pass(loaded, x, training=False)
        np.testing.assert_array_equal(out_a, out_b)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError):
            N.load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        net = N.build_network(N.two_layer_classifier(2, "adder"), RngState(1))
        path = tmp_path / "net.ckpt"
        N.save_checkpoint(net, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 16])
        with pytest.raises(ValueError):
            N.load_checkpoint(path)
