import math
from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cdl.entropy import (
    EntropyError,
    Mpmf,
    activation_entropy_terms,
    entropy_penalty_gradients,
    entropy_report,
    layer_mpmf,
    shannon_entropy,
)
from cdl.gradcheck import check_entropy
from cdl.net.layers import Dense, LayerQuantParams
from cdl.quant import QuantGrid, make_cpmf
from cdl.utils import relative_error


GRID = QuantGrid(3, 0.1)


def cpmf_entropy(probs: np.ndarray) -> float:
    nonzero = probs[probs > 0]
    return float(-(nonzero * np.log2(nonzero)).sum())


def fake_model(*layers):
    return SimpleNamespace(weighted_layers=lambda: list(layers))


def layer_with(weights: np.ndarray, alpha: float, bits: int = 2, activations: bool = False, name: str = "dense") -> Dense:
    weights = np.asarray(weights, dtype=np.float64).reshape(1, -1)
    layer = Dense(weights.shape[1], 1, name=name, weight=weights)
    layer.quant = LayerQuantParams.from_values(1.0, 1.0, alpha, 50.0, bits, quantize_activations=activations,
                                               weight_count=weights.size, activation_count=3 if activations else 0)
    return layer


class TestMpmf:
    def test_identical_values_at_a_level(self):
        mpmf = layer_mpmf(np.full(20, 0.2), GRID, 1e6)
        expected = np.zeros(GRID.size)
        expected[2 - GRID.min_index] = 1.0
        assert_allclose(mpmf.probs, expected, atol=1e-12)
        assert mpmf.population_size == 20

    def test_two_point_masses(self):
        mpmf = layer_mpmf(np.array([-0.3, 0.1]), GRID, 1e6)
        assert mpmf.probs[-3 - GRID.min_index] == pytest.approx(0.5)
        assert mpmf.probs[1 - GRID.min_index] == pytest.approx(0.5)
        assert shannon_entropy(mpmf) == pytest.approx(1.0)

    def test_uniform_population_is_near_maximal(self, rng):
        grid = QuantGrid(4, 0.1)
        values = rng.uniform(grid.min_index - 0.5, grid.max_index + 0.5, size=1000) * grid.step
        mpmf = layer_mpmf(values, grid, 200.0)
        oracle = np.mean([make_cpmf(float(v), grid, 200.0).probs for v in values], axis=0)
        assert_allclose(mpmf.probs, oracle, rtol=1e-10, atol=1e-15)
        assert mpmf.probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert shannon_entropy(mpmf) > 4.0 - 0.2

    def test_empty_population(self):
        with pytest.raises(EntropyError):
            layer_mpmf(np.array([]), GRID, 10.0)

    def test_mixing_never_lowers_entropy(self, rng):
        for _ in range(50):
            values = rng.normal(0.0, 0.15, size=int(rng.integers(1, 40)))
            sharpness = float(10 ** rng.uniform(1, 3))
            mpmf = layer_mpmf(values, GRID, sharpness)
            mean_cpmf_entropy = np.mean([cpmf_entropy(make_cpmf(float(v), GRID, sharpness).probs) for v in values])
            h = shannon_entropy(mpmf)
            assert mean_cpmf_entropy <= h + 1e-12
            assert 0.0 <= h <= GRID.bits + 1e-12


class TestShannonEntropy:
    def test_known_distributions(self):
        grid = QuantGrid(2, 1.0)
        assert shannon_entropy(Mpmf(grid, np.array([0.0, 1.0, 0.0, 0.0]), 1)) == 0.0
        assert shannon_entropy(Mpmf(grid, np.full(4, 0.25), 4)) == pytest.approx(2.0)
        assert shannon_entropy(Mpmf(grid, np.array([0.5, 0.25, 0.125, 0.125]), 8)) == pytest.approx(1.75)


class TestPenaltyGradients:
    def test_collapsed_population_has_zero_gradient(self):
        grads = entropy_penalty_gradients(np.full(10, 0.1), GRID, 1e6)
        assert grads.bits == pytest.approx(0.0, abs=1e-12)
        assert_allclose(grads.d_values, 0.0, atol=1e-12)
        assert grads.d_step == pytest.approx(0.0, abs=1e-12)
        assert grads.d_sharpness == pytest.approx(0.0, abs=1e-12)

    def test_symmetric_population(self):
        grid = QuantGrid(4, 0.1)
        grads = entropy_penalty_gradients(np.array([-0.1, 0.0, 0.1]), grid, 200.0)
        assert grads.d_values[1] == pytest.approx(0.0, abs=1e-9)
        assert grads.d_values[0] == pytest.approx(-grads.d_values[2], rel=1e-6)

    def test_bits_are_population_size_times_entropy(self, rng):
        values = rng.normal(0.0, 0.1, size=37)
        grads = entropy_penalty_gradients(values, GRID, 300.0)
        assert grads.bits == pytest.approx(37 * shannon_entropy(layer_mpmf(values, GRID, 300.0)))

    def test_value_gradients_match_finite_differences(self, rng):
        values = rng.normal(0.0, 0.12, size=12)
        grads = entropy_penalty_gradients(values, GRID, 150.0)
        h = 1e-7
        for index in range(values.size):
            plus, minus = values.copy(), values.copy()
            plus[index] += h
            minus[index] -= h
            numeric = (entropy_penalty_gradients(plus, GRID, 150.0).bits
                       - entropy_penalty_gradients(minus, GRID, 150.0).bits) / (2 * h)
            assert relative_error(grads.d_values[index] * 0.1, numeric * 0.1, 1e-2) < 1e-4

    def test_random_populations(self):
        result = check_entropy(10, np.random.default_rng(21))
        assert result.passed, result.worst


class TestActivationTerms:
    def test_per_sample_bits(self, rng):
        grid = QuantGrid(3, 0.2, signed=False)
        batch = np.abs(rng.normal(0.0, 0.5, size=(5, 2, 3)))
        terms = activation_entropy_terms(batch, grid, 30.0)
        assert terms.bits.shape == (5,)
        for sample in range(5):
            expected = 6 * shannon_entropy(layer_mpmf(batch[sample], grid, 30.0))
            assert terms.bits[sample] == pytest.approx(expected, rel=1e-12)
        assert terms.d_values.shape == batch.shape

    def test_gradients_sum_over_samples(self, rng):
        grid = QuantGrid(3, 0.2, signed=False)
        batch = np.abs(rng.normal(0.0, 0.5, size=(4, 6)))
        terms = activation_entropy_terms(batch, grid, 30.0)
        single = [entropy_penalty_gradients(batch[sample], grid, 30.0) for sample in range(4)]
        assert_allclose(terms.d_values, np.stack([g.d_values for g in single]), rtol=1e-10, atol=1e-12)
        assert terms.d_step == pytest.approx(sum(g.d_step for g in single), rel=1e-10)
        assert terms.d_sharpness == pytest.approx(sum(g.d_sharpness for g in single), rel=1e-10)

    def test_empty_activation_vector(self):
        with pytest.raises(EntropyError):
            activation_entropy_terms(np.zeros((3, 0)), QuantGrid(2, 1.0, signed=False), 1.0)


class TestReport:
    def test_one_hot_single_weight(self):
        layer = layer_with([1.0], alpha=1e6)
        report = entropy_report(fake_model(layer), include_activations=False)
        assert report.total_weight_bits == pytest.approx(0.0, abs=1e-12)
        assert math.isnan(report.bits_per_activation)

    def test_two_uniform_layers(self):
        first = layer_with(np.zeros(10), alpha=1e-12, name="a")
        second = layer_with(np.zeros(10), alpha=1e-12, name="b")
        report = entropy_report(fake_model(first, second), include_activations=False)
        assert report.total_weight_bits == pytest.approx(40.0, rel=1e-9)
        assert report.per_layer_weight_bits == pytest.approx([20.0, 20.0], rel=1e-9)
        assert report.bits_per_weight == pytest.approx(2.0, rel=1e-9)

    def test_totals_are_additive(self, rng):
        layers = [layer_with(rng.normal(0, 1, size=8), alpha=2.0, bits=3, name=f"l{i}") for i in range(3)]
        full = entropy_report(fake_model(*layers), include_activations=False)
        partial = entropy_report(fake_model(*layers[:2]), include_activations=False)
        assert full.total_weight_bits - partial.total_weight_bits == pytest.approx(full.per_layer_weight_bits[2])

    def test_activation_statistics_required(self, rng):
        layer = layer_with(rng.normal(size=4), alpha=2.0, activations=True)
        with pytest.raises(EntropyError):
            entropy_report(fake_model(layer))
        with pytest.raises(EntropyError):
            entropy_report(fake_model(layer), activations={5: np.ones((2, 3))})

    def test_activation_bits_average_over_samples(self, rng):
        layer = layer_with(rng.normal(size=4), alpha=2.0, activations=True)
        batch = np.abs(rng.normal(size=(6, 3)))
        report = entropy_report(fake_model(layer), activations={0: batch})
        terms = activation_entropy_terms(batch, layer.quant.activation_grid, layer.quant.beta, with_grads=False)
        assert report.total_activation_bits == pytest.approx(float(terms.bits.mean()))
        assert report.activation_counts == [3]
        document = report.to_dict()
        assert document["schema_version"] == "1.0"
        assert document["total_weight_bits"] == pytest.approx(report.total_weight_bits)
