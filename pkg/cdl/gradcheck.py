"""
Finite-difference checks of every analytic derivative in the package.

Suites:

- ``prop1``: E{(theta - Q_p)^2} = (theta - Q_d)^2 + Var{Q_p}, by exhaustive
  summation (absolute error).
- ``quant``: dQd/dtheta, dQd/dq and dQd/dsharpness against central
  differences.
- ``entropy``: the three gradient blocks of |values| * H(MPMF).
- ``network``: all five gradient groups of the full R-CDL objective on a
  small dense network with both entropy penalties on.

Derivatives are compared after scaling to dimensionless quantities
(multiplying by the step or the sharpness where needed), so one floor
applies to every instance.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from cdl.config import TrainConfig
from cdl.entropy import entropy_penalty_gradients
from cdl.net.model import Mode, Model, build_model
from cdl.quant import (
    QuantGrid,
    dqd_dq,
    dqd_dsharpness,
    dqd_dtheta,
    expected_distortion,
    make_cpmf,
    moments,
    qd,
)
from cdl.utils import make_rng, relative_error


logger = logging.getLogger(__name__)

SUITES = ("prop1", "quant", "entropy", "network")

DEFAULT_CASES = {"prop1": 10_000, "quant": 1_000, "entropy": 20, "network": 3}

# Central-difference steps: theta and values relative to q, the rest relative to the parameter
THETA_STEP = 1e-6
GRID_STEP = 1e-7
SHARPNESS_STEP = 1e-5
LOG_STEP = 1e-6

PROP1_TOLERANCE = 1e-10
THETA_TOLERANCE = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-3

# Ranges of the random check instances
SHARPNESS_RANGE = (1.0, 1e4)
STEP_RANGE = (1e-3, 1.0)


@dataclass
class SuiteResult:
    name: str
    max_error: float
    tolerance: float
    cases: int
    worst: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


class _Tracker:
    """Keeps the worst error seen per quantity."""

    def __init__(self, corrupt: float):
        self.corrupt = corrupt
        self.worst: dict[str, float] = {}

    def compare(self, quantity: str, analytic: float, numeric: float, floor: float = FLOOR) -> None:
        error = relative_error(analytic * (1.0 + self.corrupt), numeric, floor)
        if error > self.worst.get(quantity, 0.0):
            self.worst[quantity] = error

    def result(self, name: str, tolerance: float, cases: int,
               tolerances: Optional[dict[str, float]] = None) -> SuiteResult:
        # Per-quantity tolerances are folded into one normalized score
        tolerances = tolerances or {}
        scaled = {key: value * tolerance / tolerances.get(key, tolerance) for key, value in self.worst.items()}
        return SuiteResult(name=name, max_error=max(scaled.values(), default=0.0), tolerance=tolerance,
                           cases=cases, worst=dict(self.worst))


def sample_grid(rng: np.random.Generator, bits_range: tuple[int, int], rho_range: tuple[float, float],
                signed: bool = True) -> tuple[QuantGrid, float]:
    """
    Random grid and sharpness for one check instance.

    The sharpness is log-uniform over SHARPNESS_RANGE, so nearly flat CPMFs
    are covered as well as nearly hard ones. The step is then log-uniform
    over the part of STEP_RANGE where alpha * q^2 stays inside ``rho_range``.
    """
    bits = int(rng.integers(bits_range[0], bits_range[1] + 1))
    low, high = SHARPNESS_RANGE
    sharpness = float(10 ** rng.uniform(math.log10(low), math.log10(high)))
    step_low = max(STEP_RANGE[0], math.sqrt(rho_range[0] / sharpness))
    step_high = min(STEP_RANGE[1], math.sqrt(rho_range[1] / sharpness))
    step = float(10 ** rng.uniform(math.log10(step_low), math.log10(step_high)))
    return QuantGrid(bits, step, signed), sharpness


def _random_theta(rng: np.random.Generator, grid: QuantGrid) -> float:
    return float(rng.uniform(grid.min_index - 1, grid.max_index + 1) * grid.step)


def check_prop1(cases: int, rng: np.random.Generator) -> SuiteResult:
    """Distortion decomposition over random (theta, b, q, alpha)."""
    worst = 0.0
    for _ in range(cases):
        grid, sharpness = sample_grid(rng, (1, 6), (1e-3, 1e3))
        cpmf = make_cpmf(_random_theta(rng, grid), grid, sharpness)
        gap = expected_distortion(cpmf) - (cpmf.input - qd(cpmf)) ** 2 - moments(cpmf).var
        worst = max(worst, abs(gap))
    return SuiteResult(name="prop1", max_error=worst, tolerance=PROP1_TOLERANCE, cases=cases,
                       worst={"distortion": worst})


def check_quant(cases: int, rng: np.random.Generator, corrupt: float = 0.0) -> SuiteResult:
    """Analytic partials of Q_d against central differences."""
    tracker = _Tracker(corrupt)
    for _ in range(cases):
        grid, sharpness = sample_grid(rng, (2, 6), (1e-2, 50.0))
        theta = _random_theta(rng, grid)
        cpmf = make_cpmf(theta, grid, sharpness)
        step = grid.step

        h = THETA_STEP * step
        numeric = (qd(make_cpmf(theta + h, grid, sharpness)) - qd(make_cpmf(theta - h, grid, sharpness))) / (2 * h)
        tracker.compare("dtheta", dqd_dtheta(cpmf), numeric)

        h = GRID_STEP * step
        numeric = (qd(make_cpmf(theta, grid.with_step(step + h), sharpness))
                   - qd(make_cpmf(theta, grid.with_step(step - h), sharpness))) / (2 * h)
        tracker.compare("dq", dqd_dq(cpmf), numeric)

        h = SHARPNESS_STEP * sharpness
        numeric = (qd(make_cpmf(theta, grid, sharpness + h)) - qd(make_cpmf(theta, grid, sharpness - h))) / (2 * h)
        tracker.compare("dsharpness", dqd_dsharpness(cpmf) * sharpness / step, numeric * sharpness / step)

    return tracker.result("quant", TOLERANCE, cases, {"dtheta": THETA_TOLERANCE})


def check_entropy(cases: int, rng: np.random.Generator, corrupt: float = 0.0) -> SuiteResult:
    """Gradients of the layer bits |values| * H(MPMF) over random populations."""
    tracker = _Tracker(corrupt)
    for _ in range(cases):
        grid, sharpness = sample_grid(rng, (2, 4), (0.1, 10.0))
        count = int(rng.integers(1, 51))
        values = rng.uniform(grid.min_index - 1, grid.max_index + 1, size=count) * grid.step
        grads = entropy_penalty_gradients(values, grid, sharpness)

        def bits(population: np.ndarray = values, g: QuantGrid = grid, a: float = sharpness) -> float:
            return entropy_penalty_gradients(population, g, a).bits

        h = THETA_STEP * grid.step
        for index in range(count):
            plus, minus = values.copy(), values.copy()
            plus[index] += h
            minus[index] -= h
            numeric = (bits(plus) - bits(minus)) / (2 * h)
            tracker.compare("d_values", grads.d_values[index] * grid.step, numeric * grid.step, 1e-2)

        h = GRID_STEP * grid.step
        numeric = (bits(g=grid.with_step(grid.step + h)) - bits(g=grid.with_step(grid.step - h))) / (2 * h)
        tracker.compare("d_step", grads.d_step * grid.step, numeric * grid.step, 1e-2)

        h = SHARPNESS_STEP * sharpness
        numeric = (bits(a=sharpness + h) - bits(a=sharpness - h)) / (2 * h)
        tracker.compare("d_sharpness", grads.d_sharpness * sharpness, numeric * sharpness, 1e-2)

    return tracker.result("entropy", TOLERANCE, cases)


def gradcheck_model(rng: np.random.Generator, inputs: int = 2, hidden: int = 4, classes: int = 2,
                    batch: int = 8, bits: int = 3) -> tuple[Model, np.ndarray, np.ndarray]:
    """
    Small dense network with quantizer state for end-to-end checks.

    Sharpness values are set so alpha * q^2 = beta * s^2 = 2, where the
    soft quantizer is neither flat nor a step function.
    """
    from cdl.train import init_quant_params

    model = build_model("tiny", (inputs,), classes, rng, bits=bits, exempt_first_last=False, hidden=hidden)
    x = rng.normal(0.0, 1.0, size=(batch, inputs))
    y = rng.integers(0, classes, size=batch)
    init_quant_params(model, x, bits)
    for layer in model.weighted_layers():
        quant = layer.quant
        quant.log_alpha = math.log(2.0 / quant.q ** 2)
        quant.log_beta = math.log(2.0 / quant.s ** 2)
    return model, x, y


def check_network(cases: int, rng: np.random.Generator, corrupt: float = 0.0,
                  lam: float = 0.05, gamma: float = 0.05) -> SuiteResult:
    """Every gradient group of the R-CDL objective against central differences."""
    from cdl.train import objective_and_gradients

    config = TrainConfig(lam=lam, gamma=gamma, mode="rcdl", bits=3, activation_topk=None, model="tiny",
                         dataset="synthetic", exempt_first_last=False)
    tracker = _Tracker(corrupt)

    for _ in range(cases):
        model, x, y = gradcheck_model(rng)

        def objective() -> float:
            return objective_and_gradients(model, x, y, config, mode=Mode.RCDL, with_grads=False).objective

        grads = objective_and_gradients(model, x, y, config, mode=Mode.RCDL).grads
        for layer, layer_grads in zip(model.weighted_layers(), grads.layers):
            for label, array, analytic in (("weight", layer.weight, layer_grads.weight),
                                           ("bias", layer.bias, layer_grads.bias)):
                floor = max(1e-5, FLOOR * float(np.abs(analytic).max()))
                for index in np.ndindex(array.shape):
                    original = array[index]
                    array[index] = original + THETA_STEP
                    plus = objective()
                    array[index] = original - THETA_STEP
                    minus = objective()
                    array[index] = original
                    tracker.compare(label, float(analytic[index]), (plus - minus) / (2 * THETA_STEP), floor)

            quant = layer.quant
            groups = [("q", "log_q", layer_grads.q), ("alpha", "log_alpha", layer_grads.alpha)]
            if quant.quantize_activations:
                groups += [("s", "log_s", layer_grads.s), ("beta", "log_beta", layer_grads.beta)]
            for label, slot, analytic in groups:
                original = getattr(quant, slot)
                setattr(quant, slot, original + LOG_STEP)
                plus = objective()
                setattr(quant, slot, original - LOG_STEP)
                minus = objective()
                setattr(quant, slot, original)
                # dJ/dp from a log-space perturbation: the parameter moves by p (e^d - e^-d)
                value = math.exp(original)
                numeric = (plus - minus) / (value * (math.exp(LOG_STEP) - math.exp(-LOG_STEP)))
                tracker.compare(label, analytic * value, numeric * value, 1e-5)

    return tracker.result("network", TOLERANCE, cases)


_RUNNERS: dict[str, Callable[..., SuiteResult]] = {
    "prop1": lambda cases, rng, corrupt: check_prop1(cases, rng),
    "quant": check_quant,
    "entropy": check_entropy,
    "network": check_network,
}


def run_gradcheck(suites: Sequence[str] = SUITES, seed: int = 0, cases: Optional[dict[str, int]] = None,
                  corrupt: float = 0.0) -> list[SuiteResult]:
    """
    Run the requested suites, each on its own random stream.

    Args:
        suites: Suite names from SUITES
        seed: Base seed
        cases: Per-suite instance counts (defaults in DEFAULT_CASES)
        corrupt: Relative error injected into every analytic derivative
            (negative control; 0 leaves them untouched)

    Returns:
        list[SuiteResult]: One result per suite, in the requested order

    Raises:
        ValueError: If a suite name is unknown
    """
    unknown = [name for name in suites if name not in SUITES]
    if unknown:
        raise ValueError(f"Unknown gradcheck suite(s): {', '.join(unknown)} (known: {', '.join(SUITES)})")

    counts = {**DEFAULT_CASES, **(cases or {})}
    results = []
    for name in suites:
        result = _RUNNERS[name](counts[name], make_rng(seed, SUITES.index(name)), corrupt)
        status = "PASS" if result.passed else "FAIL"
        logger.info(f"{name}: {status} max error {result.max_error:.3e} (tolerance {result.tolerance:g}, "
                    f"{result.cases} cases)")
        results.append(result)
    return results
