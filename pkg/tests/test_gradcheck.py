import numpy as np
import pytest

from cdl.gradcheck import SUITES, check_prop1, check_quant, run_gradcheck, sample_grid


SMALL = {"prop1": 500, "quant": 100, "entropy": 4, "network": 1}


def test_every_suite_passes():
    results = run_gradcheck(seed=3, cases=SMALL)
    assert [result.name for result in results] == list(SUITES)
    for result in results:
        assert result.passed, (result.name, result.worst)
        assert result.cases == SMALL[result.name]


def test_corrupted_derivatives_are_caught():
    results = {result.name: result for result in run_gradcheck(seed=3, cases=SMALL, corrupt=0.01)}
    assert results["prop1"].passed
    for name in ("quant", "entropy", "network"):
        assert not results[name].passed
        assert results[name].max_error > 1e-3


def test_suite_selection_and_unknown_names():
    assert [result.name for result in run_gradcheck(["quant"], cases={"quant": 5})] == ["quant"]
    with pytest.raises(ValueError, match="nope"):
        run_gradcheck(["quant", "nope"])


def test_reports_per_quantity_errors():
    result = check_quant(50, np.random.default_rng(0))
    assert set(result.worst) == {"dtheta", "dq", "dsharpness"}
    assert check_prop1(200, np.random.default_rng(1)).max_error < 1e-10


def test_sampled_grids_span_the_sharpness_range():
    rng = np.random.default_rng(4)
    samples = [sample_grid(rng, (2, 6), (1e-2, 50.0)) for _ in range(400)]
    sharpness = np.array([value for _, value in samples])
    rho = np.array([value * grid.step ** 2 for grid, value in samples])
    assert sharpness.min() >= 1.0 and sharpness.max() <= 1e4
    assert sharpness.min() < 2.0 and sharpness.max() > 5e3
    assert np.all(rho >= 1e-2 * (1 - 1e-9)) and np.all(rho <= 50.0 * (1 + 1e-9))
    assert all(2 <= grid.bits <= 6 for grid, _ in samples)


def test_nearly_flat_quantizers_pass(monkeypatch):
    monkeypatch.setattr("cdl.gradcheck.SHARPNESS_RANGE", (1.0, 2.0))
    result = check_quant(100, np.random.default_rng(6))
    assert result.passed, result.worst


@pytest.mark.slow
def test_default_case_counts():
    assert all(result.passed for result in run_gradcheck(seed=0))
