import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cdl.gradcheck import check_network, gradcheck_model
from cdl.net.layers import Conv2d, Dense, Flatten, ReLU
from cdl.net.model import (
    LabelError,
    Mode,
    Model,
    ModeError,
    ModelGradients,
    NonFiniteError,
    ShapeError,
    backward,
    build_model,
    forward,
    loss_ce,
    quantize_weights,
    softmax_cross_entropy,
)
from cdl.quant import dqd_dtheta, make_cpmf, moments


def naive_conv(x, weight, bias, stride, top, left, out_h, out_w):
    padded = np.pad(x, ((0, 0), (0, 0), (top, top + stride * out_h), (left, left + stride * out_w)))
    k = weight.shape[2]
    out = np.zeros((x.shape[0], weight.shape[0], out_h, out_w))
    for b in range(x.shape[0]):
        for o in range(weight.shape[0]):
            for y in range(out_h):
                for z in range(out_w):
                    window = padded[b, :, y * stride:y * stride + k, z * stride:z * stride + k]
                    out[b, o, y, z] = (window * weight[o]).sum() + bias[o]
    return out


class TestLayers:
    def test_dense_backward_matches_finite_differences(self, rng):
        layer = Dense(3, 2, bias=rng.normal(size=2))
        weight = rng.normal(size=(2, 3))
        x = rng.normal(size=(4, 3))
        upstream = rng.normal(size=(4, 2))
        out, cache = layer.forward(x, weight)
        assert_allclose(out, x @ weight.T + layer.bias)
        dx, dw, db = layer.backward(upstream, cache, weight)
        h = 1e-6
        for index in np.ndindex(weight.shape):
            bumped = weight.copy()
            bumped[index] += h
            numeric = ((layer.forward(x, bumped)[0] - out) * upstream).sum() / h
            assert dw[index] == pytest.approx(numeric, rel=1e-5, abs=1e-8)
        assert_allclose(db, upstream.sum(axis=0))
        assert_allclose(dx, upstream @ weight)

    @pytest.mark.parametrize("padding,stride,size", [("same", 2, 5), ("same", 1, 4), ("valid", 1, 5), ("valid", 2, 7)])
    def test_conv_matches_direct_loops(self, rng, padding, stride, size):
        layer = Conv2d(2, 3, 3, stride=stride, padding=padding, bias=rng.normal(size=3))
        weight = rng.normal(size=(3, 2, 3, 3))
        x = rng.normal(size=(2, 2, size, size))
        out, (_, (top, left), _) = layer.forward(x, weight)
        assert out.shape[1:] == layer.output_shape((2, size, size))
        expected = naive_conv(x, weight, layer.bias, stride, top, left, out.shape[2], out.shape[3])
        assert_allclose(out, expected, rtol=1e-12, atol=1e-12)

    def test_conv_backward_matches_finite_differences(self, rng):
        layer = Conv2d(2, 2, 3, stride=2, padding="same")
        weight = rng.normal(size=(2, 2, 3, 3))
        x = rng.normal(size=(1, 2, 5, 5))
        out, cache = layer.forward(x, weight)
        upstream = rng.normal(size=out.shape)
        dx, dw, _ = layer.backward(upstream, cache, weight)
        h = 1e-6

        def score(inputs, kernel):
            return float((layer.forward(inputs, kernel)[0] * upstream).sum())

        for index in [(0, 0, 0, 0), (1, 1, 2, 1), (0, 1, 1, 2)]:
            bumped = weight.copy()
            bumped[index] += h
            assert dw[index] == pytest.approx((score(x, bumped) - score(x, weight)) / h, rel=1e-5, abs=1e-7)
        for index in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 0, 4, 4)]:
            bumped = x.copy()
            bumped[index] += h
            assert dx[index] == pytest.approx((score(bumped, weight) - score(x, weight)) / h, rel=1e-5, abs=1e-7)

    def test_relu_and_flatten(self):
        relu, flatten = ReLU(), Flatten()
        out, mask = relu.forward(np.array([[-1.0, 0.0, 2.0]]))
        assert out.tolist() == [[0.0, 0.0, 2.0]]
        assert relu.backward(np.ones((1, 3)), mask).tolist() == [[0.0, 0.0, 1.0]]
        flat, shape = flatten.forward(np.zeros((2, 3, 4)))
        assert flat.shape == (2, 12)
        assert flatten.backward(flat, shape).shape == (2, 3, 4)


class TestModel:
    def test_architectures(self, rng):
        cnn = build_model("cnn", (1, 28, 28), 10, rng)
        assert [layer.name for layer in cnn.weighted_layers()] == ["conv0", "conv1", "dense2"]
        assert cnn.weighted_layers()[-1].weight.shape == (10, 784)
        assert sorted(cnn.activation_points.values()) == [0, 1]
        assert cnn.activation_shape(0) == (8, 14, 14)
        assert cnn.activation_shape(2) is None

        mlp = build_model("mlp", (1, 28, 28), 10, rng)
        assert [layer.weight.shape for layer in mlp.weighted_layers()] == [(128, 784), (10, 128)]
        assert mlp.num_classes == 10

    def test_exempt_flags(self, rng):
        cnn = build_model("cnn", (1, 28, 28), 10, rng)
        assert [layer.exempt_8bit for layer in cnn.weighted_layers()] == [True, False, True]
        plain = build_model("cnn", (1, 28, 28), 10, rng, exempt_first_last=False)
        assert not any(layer.exempt_8bit for layer in plain.weighted_layers())

    def test_unknown_architecture(self, rng):
        with pytest.raises(ModeError):
            build_model("resnet", (1, 28, 28), 10, rng)

    def test_shape_mismatches(self, rng):
        with pytest.raises(ShapeError):
            Model([Flatten(), Dense(10, 4)], (1, 3, 3))
        model = build_model("tiny", (1, 4, 4), 3, rng)
        with pytest.raises(ShapeError):
            forward(model, np.zeros((2, 1, 5, 5)), Mode.FP)

    def test_clone_is_independent(self, rng):
        model = build_model("tiny", (1, 4, 4), 3, rng)
        copy = model.clone()
        copy.weighted_layers()[0].weight[...] = 0.0
        assert np.any(model.weighted_layers()[0].weight != 0.0)


class TestLoss:
    def test_batch_loss_is_mean_of_single_losses(self, rng):
        logits = rng.normal(size=(5, 4))
        labels = np.array([0, 3, 1, 1, 2])
        loss, dlogits = softmax_cross_entropy(logits, labels)
        assert loss == pytest.approx(np.mean([loss_ce(row, label) for row, label in zip(logits, labels)]))
        assert_allclose(dlogits.sum(axis=1), 0.0, atol=1e-15)

    def test_stable_for_large_logits(self):
        assert loss_ce(np.array([1000.0, 0.0]), 0) == pytest.approx(0.0, abs=1e-12)

    def test_label_range(self):
        with pytest.raises(LabelError):
            loss_ce(np.zeros(3), 3)
        with pytest.raises(LabelError):
            softmax_cross_entropy(np.zeros((2, 3)), np.array([0, -1]))


class TestModes:
    def test_fp_uses_master_weights(self, quantized_model):
        weights = quantize_weights(quantized_model, Mode.FP)
        for layer, effective in zip(quantized_model.weighted_layers(), weights):
            assert effective.values is layer.weight

    def test_quantized_modes_need_state(self, rng):
        model = build_model("tiny", (1, 4, 4), 3, rng)
        with pytest.raises(ModeError):
            quantize_weights(model, Mode.RCDL)

    def test_cdl_needs_a_stream(self, quantized_model):
        with pytest.raises(ModeError):
            quantize_weights(quantized_model, Mode.CDL)

    def test_cdl_values_lie_on_the_grid(self, quantized_model, tiny_dataset):
        rng = np.random.default_rng(2)
        trace = forward(quantized_model, tiny_dataset.train_x[:8], Mode.CDL, rng=rng)
        for layer, effective in zip(quantized_model.weighted_layers(), trace.weights):
            assert_allclose(effective.values, effective.indices * layer.quant.q)
            assert effective.indices.min() >= layer.quant.weight_grid.min_index
        record = trace.activations[0]
        quant = quantized_model.weighted_layers()[0].quant
        assert_allclose(record.values, record.indices * quant.s)
        assert record.indices.min() >= 0

    def test_cdl_is_reproducible(self, quantized_model, tiny_dataset):
        x = tiny_dataset.train_x[:8]
        first = forward(quantized_model, x, Mode.CDL, rng=np.random.default_rng(4)).logits
        second = forward(quantized_model, x, Mode.CDL, rng=np.random.default_rng(4)).logits
        assert np.array_equal(first, second)

    def test_rcdl_is_deterministic(self, quantized_model, tiny_dataset):
        x = tiny_dataset.train_x[:8]
        assert np.array_equal(forward(quantized_model, x, Mode.RCDL).logits,
                              forward(quantized_model, x, Mode.RCDL).logits)

    def test_non_finite_weights(self, quantized_model, tiny_dataset):
        quantized_model.weighted_layers()[0].weight[0, 0] = np.inf
        with pytest.raises(NonFiniteError):
            forward(quantized_model, tiny_dataset.train_x[:4], Mode.FP)


class TestBackward:
    def test_rcdl_gradients_without_penalties(self):
        result = check_network(2, np.random.default_rng(8), lam=0.0, gamma=0.0)
        assert result.passed, result.worst

    def test_fp_gradients_match_finite_differences(self):
        model, x, y = gradcheck_model(np.random.default_rng(3))
        trace = forward(model, x, Mode.FP, labels=y)
        grads = backward(trace, model)
        layer = model.weighted_layers()[0]
        h = 1e-6
        for index in np.ndindex(layer.weight.shape):
            original = layer.weight[index]
            layer.weight[index] = original + h
            plus = forward(model, x, Mode.FP, labels=y).loss
            layer.weight[index] = original - h
            minus = forward(model, x, Mode.FP, labels=y).loss
            layer.weight[index] = original
            assert grads.layers[0].weight[index] == pytest.approx((plus - minus) / (2 * h), rel=1e-5, abs=1e-9)
        assert grads.layers[0].q == 0.0

    def test_cdl_hybrid_gradients_are_finite(self, quantized_model, tiny_dataset):
        x, y = tiny_dataset.train_x[:16], tiny_dataset.train_y[:16]
        trace = forward(quantized_model, x, Mode.CDL, rng=np.random.default_rng(6), labels=y)
        grads = backward(trace, quantized_model, mode=Mode.CDL)
        assert grads.all_finite()
        assert grads.layers[0].s != 0.0
        assert grads.layers[-1].s == 0.0

    def test_mode_mismatch_and_missing_labels(self, quantized_model, tiny_dataset):
        x = tiny_dataset.train_x[:4]
        trace = forward(quantized_model, x, Mode.RCDL, labels=tiny_dataset.train_y[:4])
        with pytest.raises(ModeError):
            backward(trace, quantized_model, mode=Mode.FP)
        with pytest.raises(LabelError):
            backward(forward(quantized_model, x, Mode.RCDL), quantized_model)

    def test_all_finite_detects_nan(self, quantized_model):
        grads = ModelGradients.zeros(quantized_model)
        assert grads.all_finite()
        grads.layers[0].alpha = float("nan")
        assert not grads.all_finite()


def on_grid_network(sharpness: float = 1e6):
    """2-4-2 network whose weights and hidden activations all sit on their grids."""
    model, _, y = gradcheck_model(np.random.default_rng(21))
    first, last = model.weighted_layers()
    first.weight[...] = first.quant.q * np.array([[1.0, 2.0], [2.0, 1.0], [3.0, 0.0], [-1.0, -2.0]])
    first.bias[...] = 0.0
    first.quant.log_s = first.quant.log_q
    last.weight[...] = last.quant.q * np.array([[1.0, -1.0, 2.0, 0.0], [-2.0, 1.0, 0.0, 3.0]])
    for layer in (first, last):
        layer.quant.log_alpha = math.log(sharpness / layer.quant.q ** 2)
        layer.quant.log_beta = math.log(sharpness / layer.quant.s ** 2)
    x = np.array([[1, 0], [0, 1], [1, 1], [0, 0], [1, 1], [1, 0], [0, 1], [1, 1]], dtype=np.float64)
    return model, x, y


class TestQuantizedNetwork:
    def test_sharp_quantizers_on_grid_match_full_precision(self):
        model, x, _ = on_grid_network()
        fp = forward(model, x, Mode.FP).logits
        cdl = forward(model, x, Mode.CDL, rng=np.random.default_rng(0))
        for drawn, layer in zip(cdl.weights, model.weighted_layers()):
            assert np.array_equal(drawn.values, layer.weight)
        assert_allclose(cdl.logits, fp, rtol=0.0, atol=1e-12)
        assert_allclose(forward(model, x, Mode.RCDL).logits, fp, rtol=0.0, atol=1e-12)

    def test_cdl_logits_stay_within_the_rcdl_variance_bound(self):
        model, x, _ = gradcheck_model(np.random.default_rng(8), bits=6)
        for layer in model.weighted_layers():
            layer.quant.log_q = layer.quant.log_s = math.log(math.sqrt(2.0 / 700.0))
            layer.quant.log_alpha = layer.quant.log_beta = math.log(700.0)
        first, last = model.weighted_layers()

        rcdl = forward(model, x, Mode.RCDL)
        w_mean = [weights.values for weights in rcdl.weights]
        w_var = [
            np.array([moments(make_cpmf(w, layer.quant.weight_grid, layer.quant.alpha)).var
                      for w in layer.weight.ravel()]).reshape(layer.weight.shape)
            for layer in (first, last)
        ]
        hidden = rcdl.activations[0]
        cpmfs = [[make_cpmf(h, first.quant.activation_grid, first.quant.beta) for h in row] for row in hidden.pre]
        a_var = np.array([[moments(cpmf).var for cpmf in row] for row in cpmfs])
        slope = np.array([[dqd_dtheta(cpmf) for cpmf in row] for row in cpmfs])
        # weight noise of the first layer reaches only the active units
        h_var = (hidden.pre > 0) * ((x ** 2) @ w_var[0].T)
        bound = (hidden.values ** 2) @ w_var[1].T + (a_var + slope ** 2 * h_var) @ (w_mean[1] ** 2).T

        rng = np.random.default_rng(3)
        draws = np.stack([forward(model, x, Mode.CDL, rng=rng).logits for _ in range(200)])
        spread = ((draws - rcdl.logits) ** 2).mean()
        assert 0.0 < spread <= 4.0 * bound.mean()

    def test_degenerate_quantizers_flatten_the_weight_gradient(self):
        model, x, y = on_grid_network()
        fp = backward(forward(model, x, Mode.FP, labels=y), model)
        rcdl = backward(forward(model, x, Mode.RCDL, labels=y), model)
        for quantized, full in zip(rcdl.layers, fp.layers):
            assert np.linalg.norm(full.weight) > 0.0
            assert np.linalg.norm(quantized.weight) < 1e-3 * np.linalg.norm(full.weight)

    @pytest.mark.parametrize("mode", [Mode.RCDL, Mode.CDL])
    def test_inactive_unit_gets_no_gradient(self, mode):
        model, x, y = gradcheck_model(np.random.default_rng(5))
        first = model.weighted_layers()[0]
        first.bias[1] = -1e3
        trace = forward(model, x, mode, rng=np.random.default_rng(2), labels=y)
        assert np.all(trace.activations[0].pre[:, 1] == 0.0)

        grads = backward(trace, model, mode=mode)
        assert grads.layers[0].bias[1] == 0.0
        assert np.all(grads.layers[0].weight[1] == 0.0)
        assert np.any(grads.layers[0].weight != 0.0)
