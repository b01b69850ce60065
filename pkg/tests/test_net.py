import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birdcrnn import net
from birdcrnn.errors import ConfigError, DataError, FormatError, ShapeError, TruncatedError

TINY = net.ModelConfig(
    n_feature_maps=4, conv_pooling=(2,), n_recurrent_layers=1,
    recurrent_type="gru", dropout_rate=0.0, n_mels=8, seed=1,
)


def naive_conv2d(x, kernel, bias):
    """Direct sliding-window sum with explicit zero same-padding."""
    maps_out, maps_in, kt, kf = kernel.shape
    _, t_len, f_len = x.shape
    padded = np.pad(x, ((0, 0), (kt // 2, kt // 2), (kf // 2, kf // 2)))
    out = np.zeros((maps_out, t_len, f_len))
    for o in range(maps_out):
        for t in range(t_len):
            for f in range(f_len):
                acc = 0.0
                for c in range(maps_in):
                    for i in range(kt):
                        for j in range(kf):
                            acc += kernel[o, c, i, j] * padded[c, t + i, f + j]
                out[o, t, f] = acc + bias[o]
    return out


def scalar_gru(x_seq, layer):
    """Independent step-by-step GRU oracle using plain Python loops."""

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    t_len, d = x_seq.shape
    h_size = layer.b_z.size
    h_prev = [0.0] * h_size
    out = np.zeros((t_len, h_size))
    for t in range(t_len):
        z = [0.0] * h_size
        r = [0.0] * h_size
        g = [0.0] * h_size
        for u in range(h_size):
            az = layer.b_z[u] + sum(layer.W_z[u, k] * x_seq[t, k] for k in range(d))
            ar = layer.b_r[u] + sum(layer.W_r[u, k] * x_seq[t, k] for k in range(d))
            az += sum(layer.U_z[u, k] * h_prev[k] for k in range(h_size))
            ar += sum(layer.U_r[u, k] * h_prev[k] for k in range(h_size))
            z[u] = sig(az)
            r[u] = sig(ar)
        for u in range(h_size):
            ag = layer.b_h[u] + sum(layer.W_h[u, k] * x_seq[t, k] for k in range(d))
            ag += sum(layer.U_h[u, k] * r[k] * h_prev[k] for k in range(h_size))
            g[u] = math.tanh(ag)
        h_prev = [(1.0 - z[u]) * h_prev[u] + z[u] * g[u] for u in range(h_size)]
        out[t] = h_prev
    return out


def make_gru_layer(rng, h_size, d):
    return net.GruLayer(
        W_z=rng.standard_normal((h_size, d)) * 0.4,
        W_r=rng.standard_normal((h_size, d)) * 0.4,
        W_h=rng.standard_normal((h_size, d)) * 0.4,
        U_z=rng.standard_normal((h_size, h_size)) * 0.4,
        U_r=rng.standard_normal((h_size, h_size)) * 0.4,
        U_h=rng.standard_normal((h_size, h_size)) * 0.4,
        b_z=rng.standard_normal(h_size) * 0.1,
        b_r=rng.standard_normal(h_size) * 0.1,
        b_h=rng.standard_normal(h_size) * 0.1,
    )


def bypass_bn_layer(kernel, pool=1):
    maps = kernel.shape[0]
    return net.ConvLayer(
        kernel=kernel, bias=np.zeros(maps), gamma=np.ones(maps), beta=np.zeros(maps),
        running_mean=np.zeros(maps), running_var=np.ones(maps), pool=pool,
    )


class TestModelConfig:
    def test_full_reduction_shapes(self):
        config = net.ModelConfig(n_feature_maps=6, conv_pooling=(5, 4, 2), n_mels=40)
        assert config.band_progression == (40, 8, 2, 1)
        assert config.conv_output_bands == 1
        assert config.recurrent_input_size == 6

    def test_partial_reduction_allowed(self):
        config = net.ModelConfig(conv_pooling=(4,), n_mels=40)
        assert config.conv_output_bands == 10

    def test_uneven_pooling_rejected(self):
        with pytest.raises(ConfigError):
            net.ModelConfig(conv_pooling=(3,), n_mels=40)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            net.ModelConfig(kernel=(2, 3))

    def test_json_round_trip(self):
        config = net.ModelConfig(n_feature_maps=5, conv_pooling=(2, 2), n_mels=8, seed=3)
        assert net.ModelConfig.from_json(config.to_json()) == config


class TestInitModel:
    def test_same_seed_bit_identical(self):
        a = net.init_model(TINY)
        b = net.init_model(TINY)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa, pb)

    def test_different_seed_differs(self):
        a = net.init_model(TINY)
        b = net.init_model(dataclasses.replace(TINY, seed=2))
        assert any(
            not np.array_equal(pa, pb)
            for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters())
        )

    def test_bn_initialized_to_identity(self):
        model = net.init_model(TINY)
        layer = model.conv_layers[0]
        assert np.all(layer.gamma == 1.0) and np.all(layer.beta == 0.0)
        assert np.all(layer.running_mean == 0.0) and np.all(layer.running_var == 1.0)
        assert np.all(layer.bias == 0.0)


class TestConvBlock:
    def test_matches_naive_conv(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 8, 8))
        kernel = rng.standard_normal((3, 1, 3, 3))
        bias = rng.standard_normal(3)
        fast = net._conv2d(x, kernel, bias)
        slow = naive_conv2d(x, kernel, bias)
        np.testing.assert_allclose(fast, slow, atol=1e-10)

    def test_identity_kernel_is_relu(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 6, 4))
        layer = bypass_bn_layer(np.ones((1, 1, 1, 1)), pool=1)
        out, _ = net.conv_block_forward(x, layer, "infer")
        np.testing.assert_allclose(out, np.maximum(x, 0.0), rtol=1e-4, atol=1e-7)

    def test_all_negative_preactivations_zero_out(self):
        x = -np.abs(np.random.default_rng(2).standard_normal((1, 5, 4))) - 0.1
        layer = bypass_bn_layer(np.ones((2, 1, 1, 1)), pool=2)
        out, _ = net.conv_block_forward(x, layer, "infer")
        assert np.all(out == 0.0)

    def test_pool_divisibility_enforced(self):
        layer = bypass_bn_layer(np.ones((1, 1, 1, 1)), pool=3)
        with pytest.raises(ShapeError):
            net.conv_block_forward(np.zeros((1, 4, 4)), layer, "infer")

    def test_train_mode_updates_running_stats(self):
        rng = np.random.default_rng(3)
        layer = bypass_bn_layer(rng.standard_normal((2, 1, 3, 3)), pool=2)
        before = layer.running_mean.copy()
        net.conv_block_forward(rng.standard_normal((1, 6, 4)), layer, "train")
        assert not np.array_equal(layer.running_mean, before)

    def test_infer_mode_is_pure(self):
        rng = np.random.default_rng(4)
        layer = bypass_bn_layer(rng.standard_normal((2, 1, 3, 3)), pool=2)
        before = (layer.running_mean.copy(), layer.running_var.copy())
        net.conv_block_forward(rng.standard_normal((1, 6, 4)), layer, "infer")
        np.testing.assert_array_equal(layer.running_mean, before[0])
        np.testing.assert_array_equal(layer.running_var, before[1])

    def test_frequency_shift_maps_to_pooled_shift(self):
        # circular shift by the pool size relocates pooled columns by one,
        # away from the zero-padded frequency borders
        rng = np.random.default_rng(5)
        pool = 5
        x = rng.standard_normal((1, 9, 40))
        layer = bypass_bn_layer(rng.standard_normal((3, 1, 3, 3)), pool=pool)
        base, _ = net.conv_block_forward(x, layer, "infer")
        shifted, _ = net.conv_block_forward(np.roll(x, pool, axis=2), layer, "infer")
        np.testing.assert_allclose(shifted[:, :, 2:-1], base[:, :, 1:-2], atol=1e-12)


class TestGruLayer:
    def test_zero_weights_zero_output(self):
        layer = net.GruLayer(*[np.zeros((3, 2)) for _ in range(3)],
                             *[np.zeros((3, 3)) for _ in range(3)],
                             *[np.zeros(3) for _ in range(3)])
        h, _ = net.gru_layer_forward(np.random.default_rng(0).standard_normal((6, 2)), layer, "infer")
        np.testing.assert_array_equal(h, 0.0)

    def test_forced_h0_halves(self):
        layer = net.GruLayer(*[np.zeros((3, 2)) for _ in range(3)],
                             *[np.zeros((3, 3)) for _ in range(3)],
                             *[np.zeros(3) for _ in range(3)])
        v = np.array([1.0, -2.0, 0.5])
        h, _ = net.gru_layer_forward(np.zeros((1, 2)), layer, "infer", h0=v)
        np.testing.assert_allclose(h[0], 0.5 * v, atol=1e-15)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(6)
        layer = make_gru_layer(rng, 4, 4)
        x = rng.standard_normal((5, 4))
        fast, _ = net.gru_layer_forward(x, layer, "infer")
        slow = scalar_gru(x, layer)
        np.testing.assert_allclose(fast, slow, atol=1e-12)

    def test_input_size_mismatch(self):
        rng = np.random.default_rng(7)
        layer = make_gru_layer(rng, 3, 5)
        with pytest.raises(ShapeError):
            net.gru_layer_forward(np.zeros((4, 2)), layer, "infer")


class TestTemporalMaxPool:
    def test_singleton(self):
        row = np.array([[1.0, -2.0, 3.0]])
        out, argmax = net.temporal_max_pool(row)
        np.testing.assert_array_equal(out, row[0])
        np.testing.assert_array_equal(argmax, 0)

    def test_max_with_index(self):
        seq = np.array([[-1.0], [3.0], [2.0]])
        out, argmax = net.temporal_max_pool(seq)
        assert out[0] == 3.0 and argmax[0] == 1

    def test_tie_resolves_to_smallest_t(self):
        seq = np.array([[2.0], [2.0], [1.0]])
        _, argmax = net.temporal_max_pool(seq)
        assert argmax[0] == 0

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            net.temporal_max_pool(np.zeros((0, 3)))

    @given(seed=st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=40, deadline=None)
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        seq = rng.standard_normal((7, 5))
        base, _ = net.temporal_max_pool(seq)
        permuted, _ = net.temporal_max_pool(rng.permutation(seq, axis=0))
        np.testing.assert_array_equal(base, permuted)

    def test_classifier_probability_invariant_to_time_order(self):
        # injected final sequence, pooled and pushed through the output unit
        rng = np.random.default_rng(41)
        model = net.init_model(TINY)
        seq = rng.standard_normal((9, model.config.classifier_input_size))
        probs = set()
        for _ in range(5):
            pooled, _ = net.temporal_max_pool(rng.permutation(seq, axis=0))
            logit = model.out_weight @ pooled + model.out_bias[0]
            probs.add(float(net.sigmoid(np.float64(logit))))
        assert len(probs) == 1


class TestForward:
    def test_zero_model_gives_half(self):
        model = net.init_model(TINY)
        for _, p in model.named_parameters():
            p[...] = 0.0
        features = np.random.default_rng(8).standard_normal((6, 8))
        for mode in ("train", "infer"):
            p, _ = net.forward(model, features, mode=mode)
            assert p == 0.5

    def test_probability_in_open_interval(self):
        model = net.init_model(TINY)
        p, _ = net.forward(model, np.random.default_rng(9).standard_normal((6, 8)) * 50)
        assert 0.0 < p < 1.0

    def test_time_duplication_invariance_without_recurrence(self):
        # time-kernel width 1 so the junction introduces no new conv responses
        config = net.ModelConfig(
            n_feature_maps=3, conv_pooling=(2,), kernel=(1, 3),
            n_recurrent_layers=0, dropout_rate=0.0, n_mels=8, seed=4,
        )
        model = net.init_model(config)
        x = np.random.default_rng(10).standard_normal((5, 8))
        p_single, _ = net.forward(model, x, mode="infer")
        p_double, _ = net.forward(model, np.vstack([x, x]), mode="infer")
        assert p_single == p_double

    def test_band_count_checked(self):
        model = net.init_model(TINY)
        with pytest.raises(ShapeError):
            net.forward(model, np.zeros((5, 7)))

    def test_train_mode_needs_rng_when_dropout_on(self):
        model = net.init_model(dataclasses.replace(TINY, dropout_rate=0.25))
        with pytest.raises(ConfigError):
            net.forward(model, np.zeros((5, 8)), mode="train")

    def test_infer_deterministic_with_dropout_configured(self):
        model = net.init_model(dataclasses.replace(TINY, dropout_rate=0.25))
        x = np.random.default_rng(11).standard_normal((6, 8))
        p1, _ = net.forward(model, x, mode="infer")
        p2, _ = net.forward(model, x, mode="infer")
        assert p1 == p2

    def test_baseline_variant_matches_gru_shapes(self):
        x = np.random.default_rng(12).standard_normal((6, 8))
        traces = {}
        for rec_type in ("gru", "feedforward"):
            config = dataclasses.replace(TINY, recurrent_type=rec_type)
            _, trace = net.forward(net.init_model(config), x, mode="infer")
            traces[rec_type] = trace
        a, b = traces["gru"], traces["feedforward"]
        assert a.stack_shape == b.stack_shape
        assert a.pooled.shape == b.pooled.shape
        assert [c.h.shape for c in a.recurrent] == [c.h.shape for c in b.recurrent]


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self):
        model = net.init_model(TINY)
        _, trace = net.forward(model, np.random.default_rng(13).standard_normal((6, 8)), mode="train")
        grads = net.backward(model, trace, 0.0)
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_output_bias_closed_form(self):
        model = net.init_model(TINY)
        _, trace = net.forward(model, np.random.default_rng(14).standard_normal((6, 8)), mode="train")
        d_p = 0.7
        grads = net.backward(model, trace, d_p)
        p = trace.probability
        assert grads["out.bias"][0] == pytest.approx(d_p * p * (1.0 - p), rel=1e-12)

    def test_infer_trace_rejected(self):
        model = net.init_model(TINY)
        _, trace = net.forward(model, np.zeros((4, 8)), mode="infer")
        with pytest.raises(DataError):
            net.backward(model, trace, 1.0)

    def test_spec_example_config_against_finite_differences(self):
        # T=7, F=8, 2 maps, one GRU layer of width 4... widths via maps=4
        config = net.ModelConfig(
            n_feature_maps=4, conv_pooling=(2,), n_recurrent_layers=1,
            recurrent_type="gru", dropout_rate=0.0, n_mels=8, seed=21,
        )
        model = net.init_model(config)
        x = np.random.default_rng(22).standard_normal((7, 8))
        _, trace = net.forward(model, x, mode="train")
        analytic = net.backward(model, trace, 1.0)
        numeric = net.finite_difference_gradients(model, x, step=1e-5)
        for name in analytic:
            np.testing.assert_allclose(analytic[name], numeric[name], rtol=1e-4, atol=1e-8)


class TestGradientCheck:
    def test_default_tiny_config_passes(self):
        assert net.gradient_check(TINY, seed=5) < 1e-4

    def test_corrupted_gradient_detected(self):
        model = net.init_model(TINY)
        x = np.random.default_rng(15).standard_normal((6, 8))
        _, trace = net.forward(model, x, mode="train")
        analytic = net.backward(model, trace, 1.0)
        analytic["out.weight"] = -analytic["out.weight"]  # deliberate corruption
        numeric = net.finite_difference_gradients(model, x)
        err = np.abs(analytic["out.weight"] - numeric["out.weight"]) / np.maximum(
            np.maximum(np.abs(analytic["out.weight"]), np.abs(numeric["out.weight"])), 1e-8
        )
        assert err.max() > 1e-1

    def test_repeatable(self):
        a = net.gradient_check(TINY, seed=6)
        b = net.gradient_check(TINY, seed=6)
        assert a == b

    def test_edge_configurations(self):
        no_recurrence = net.ModelConfig(
            n_feature_maps=4, conv_pooling=(2,), n_recurrent_layers=0,
            dropout_rate=0.0, n_mels=8, seed=3,
        )
        assert net.gradient_check(no_recurrence, seed=9, t_len=6) < 1e-4
        deep = net.ModelConfig(
            n_feature_maps=3, conv_pooling=(2, 2, 2), n_recurrent_layers=3,
            dropout_rate=0.0, n_mels=8, seed=3,
        )
        assert net.gradient_check(deep, seed=9, t_len=6) < 1e-4


class TestExportActivations:
    def test_zero_filter_exports_zero_map(self):
        model = net.init_model(TINY)
        model.conv_layers[0].kernel[1] = 0.0
        model.conv_layers[0].beta[1] = 0.0
        out = net.export_activations(model, np.random.default_rng(16).standard_normal((6, 8)), 0, 1)
        np.testing.assert_array_equal(out, 0.0)

    def test_shape_is_pre_pooling(self):
        config = net.ModelConfig(n_feature_maps=3, conv_pooling=(2, 2), n_recurrent_layers=1,
                                 dropout_rate=0.0, n_mels=8, seed=2)
        model = net.init_model(config)
        x = np.random.default_rng(17).standard_normal((6, 8))
        assert net.export_activations(model, x, 0, 0).shape == (6, 8)
        assert net.export_activations(model, x, 1, 2).shape == (6, 4)

    def test_identity_filter_exports_relu_of_input(self):
        config = net.ModelConfig(n_feature_maps=1, conv_pooling=(1,), kernel=(1, 1),
                                 n_recurrent_layers=0, dropout_rate=0.0, n_mels=8, seed=2)
        model = net.init_model(config)
        model.conv_layers[0].kernel[...] = 1.0
        x = np.random.default_rng(18).standard_normal((5, 8))
        out = net.export_activations(model, x, 0, 0)
        np.testing.assert_allclose(out, np.maximum(x, 0.0), rtol=1e-4, atol=1e-7)

    def test_index_out_of_range(self):
        model = net.init_model(TINY)
        with pytest.raises(ConfigError):
            net.export_activations(model, np.zeros((4, 8)), 5, 0)
        with pytest.raises(ConfigError):
            net.export_activations(model, np.zeros((4, 8)), 0, 99)

    def test_csv_export(self, tmp_path):
        matrix = np.array([[1.0, 0.123456789123], [2.0, 3.0]])
        path = tmp_path / "act.csv"
        net.write_activation_csv(matrix, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "1,0.123456789"
        assert lines[1] == "2,3"


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        for rec_type in ("gru", "feedforward"):
            config = dataclasses.replace(TINY, recurrent_type=rec_type, seed=31)
            model = net.init_model(config)
            # perturb so values are not fresh-init artifacts
            rng = np.random.default_rng(32)
            for _, p in model.named_parameters():
                p += rng.standard_normal(p.shape) * 0.01
            path = tmp_path / f"{rec_type}.badc"
            net.save_model(model, path)
            loaded, loaded_config = net.load_model(path)
            assert loaded_config == config
            for (na, pa), (nb, pb) in zip(model.named_parameters(), loaded.named_parameters()):
                assert na == nb
                np.testing.assert_array_equal(pa, pb)
            for la, lb in zip(model.conv_layers, loaded.conv_layers):
                np.testing.assert_array_equal(la.running_mean, lb.running_mean)
                np.testing.assert_array_equal(la.running_var, lb.running_var)

    def test_inference_identical_after_reload(self, tmp_path):
        model = net.init_model(TINY)
        x = np.random.default_rng(33).standard_normal((6, 8))
        p_before, _ = net.forward(model, x, mode="infer")
        path = tmp_path / "m.badc"
        net.save_model(model, path)
        loaded, _ = net.load_model(path)
        p_after, _ = net.forward(loaded, x, mode="infer")
        assert p_before == p_after

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "m.badc"
        path.write_bytes(b"WHAT" + b"\x00" * 32)
        with pytest.raises(FormatError):
            net.load_model(path)

    def test_truncated(self, tmp_path):
        model = net.init_model(TINY)
        path = tmp_path / "m.badc"
        net.save_model(model, path)
        path.write_bytes(path.read_bytes()[:-64])
        with pytest.raises(TruncatedError):
            net.load_model(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        model = net.init_model(TINY)
        path = tmp_path / "m.badc"
        net.save_model(model, path)
        path.write_bytes(path.read_bytes() + b"\x00" * 16)
        with pytest.raises(FormatError, match="trailing"):
            net.load_model(path)
