"""
Scalar quantization core.

Uniform reproduction grids, the softmax conditional PMF over a grid, the
probabilistic quantizer Q_p (a draw from that PMF), the soft deterministic
quantizer Q_d (its conditional mean) and the analytic partial derivatives of
Q_d with respect to the input, the step size and the sharpness.

Every function here is pure: random draws consume an explicit
``numpy.random.Generator`` passed by the caller.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from cdl.constants import CHUNK_ROWS, VAR_ROUNDOFF


logger = logging.getLogger(__name__)

_EPS = np.finfo(np.float64).eps


class QuantizationError(Exception):
    """Raised when quantizer state is internally inconsistent."""
    pass


class QuantInputError(QuantizationError):
    """Raised when a quantizer input is not finite."""
    pass


class QuantDomainError(QuantizationError):
    """Raised when a quantizer parameter lies outside its domain."""
    pass


@dataclass(frozen=True)
class QuantGrid:
    """
    Uniform reproduction alphabet ``step * [min_index, ..., max_index]``.

    Signed grids use indices -2^(b-1) .. 2^(b-1)-1 (weights), unsigned grids
    use 0 .. 2^b-1 (post-ReLU activations).
    """

    bits: int
    step: float
    signed: bool = True

    def __post_init__(self):
        if int(self.bits) != self.bits or self.bits < 1:
            raise QuantDomainError(f"Grid bit-width must be a positive integer, got {self.bits}")
        if not (math.isfinite(self.step) and self.step > 0):
            raise QuantDomainError(f"Grid step must be positive and finite, got {self.step}")

    @property
    def size(self) -> int:
        return 1 << self.bits

    @property
    def min_index(self) -> int:
        return -(1 << (self.bits - 1)) if self.signed else 0

    @property
    def max_index(self) -> int:
        return self.min_index + self.size - 1

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.min_index, self.max_index + 1, dtype=np.int64)

    @property
    def levels(self) -> np.ndarray:
        return self.indices.astype(np.float64) * self.step

    def with_step(self, step: float) -> "QuantGrid":
        """Same alphabet shape with another step size."""
        return QuantGrid(self.bits, step, self.signed)

    def nearest_index(self, values):
        """Index of the grid level closest to each value (clipped to the grid)."""
        return np.clip(np.rint(np.asarray(values, dtype=np.float64) / self.step),
                       self.min_index, self.max_index).astype(np.int64)


@dataclass(frozen=True)
class Cpmf:
    """Conditional PMF over a grid given one scalar input."""

    grid: QuantGrid
    probs: np.ndarray
    input: float
    sharpness: float


@dataclass(frozen=True)
class QuantMoments:
    """Mean, variance and unnormalized skew of Q_p given its input."""

    mean: float
    var: float
    skew_u: float


@dataclass
class SoftQuantization:
    """
    Element-wise Q_d and its partials for a whole tensor.

    ``indices`` holds Q_p draws (grid indices) taken from the same CPMF rows
    when sampling was requested.
    """

    qd: np.ndarray
    d_input: Optional[np.ndarray] = None
    d_step: Optional[np.ndarray] = None
    d_sharpness: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None


def _check_sharpness(sharpness: float) -> None:
    if not (math.isfinite(sharpness) and sharpness > 0):
        raise QuantDomainError(f"Sharpness must be positive and finite, got {sharpness}")


def _softmax_rows(values: np.ndarray, index_matrix: np.ndarray, step: float, sharpness: float) -> np.ndarray:
    """Softmax of -sharpness * (value - level)^2 along each row (max-subtracted)."""
    distance = values[:, None] - index_matrix * step
    logits = -sharpness * distance * distance
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs


def _window(values: np.ndarray, grid: QuantGrid, topk: Optional[int]) -> np.ndarray:
    """
    Grid indices each row's CPMF is supported on.

    The k largest softmax masses sit on the k grid levels nearest to the
    input, which on a uniform grid form a contiguous window.
    """
    if topk is None or topk >= grid.size:
        return grid.indices[None, :]
    if topk < 1:
        raise QuantDomainError(f"top-k must be at least 1, got {topk}")

    start = np.rint(values / grid.step - (topk - 1) / 2.0)
    start = np.clip(start, grid.min_index, grid.max_index - topk + 1).astype(np.int64)
    return start[:, None] + np.arange(topk, dtype=np.int64)[None, :]


def _guard_variance(var: np.ndarray, second_moment: np.ndarray) -> np.ndarray:
    """Clamp rounding-noise negatives to zero; larger negatives are a bug."""
    tolerance = np.maximum(VAR_ROUNDOFF, 4.0 * _EPS * second_moment)
    if np.any(var < -tolerance):
        worst = float(var.min())
        raise QuantizationError(f"Negative variance {worst:.3e} beyond rounding tolerance")
    return np.maximum(var, 0.0)


def _row_moments(values: np.ndarray, index_matrix: np.ndarray, probs: np.ndarray, grid: QuantGrid):
    """
    Per-row mean, variance, skew_u and the centred third moment.

    Sums run in a frame shifted to the level nearest each input so the
    two-term variance formula does not cancel catastrophically.
    """
    pivot = grid.nearest_index(values)
    shifted = (index_matrix - pivot[:, None]) * grid.step

    mean_shifted = (probs * shifted).sum(axis=1)
    second = (probs * shifted * shifted).sum(axis=1)
    var = _guard_variance(second - mean_shifted * mean_shifted, second)

    centred = shifted - mean_shifted[:, None]
    third_central = (probs * centred ** 3).sum(axis=1)

    mean = mean_shifted + pivot * grid.step
    # Σx³p − (Σxp)(Σx²p) rewritten in central moments
    skew_u = third_central + 2.0 * mean * var
    return mean, var, skew_u, third_central, centred


def iter_cpmf_rows(values: np.ndarray, grid: QuantGrid, sharpness: float,
                   topk: Optional[int] = None) -> Iterator[tuple[slice, np.ndarray, np.ndarray]]:
    """
    Evaluate CPMF rows for a flat array of inputs, chunk by chunk.

    Args:
        values: 1-D array of inputs
        grid: Reproduction grid
        sharpness: alpha (weights) or beta (activations)
        topk: Keep only the k nearest levels of each row (None for all)

    Yields:
        tuple: (row slice, grid-index matrix broadcastable to the rows, probs)

    Raises:
        QuantInputError: If any input is not finite
        QuantDomainError: If sharpness is not positive
    """
    _check_sharpness(sharpness)
    values = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(values)):
        raise QuantInputError("Quantizer input contains non-finite values")

    width = grid.size if topk is None else min(topk, grid.size)
    rows_per_chunk = max(1, CHUNK_ROWS * 64 // max(width, 1))

    for start in range(0, values.size, rows_per_chunk):
        rows = slice(start, min(start + rows_per_chunk, values.size))
        chunk = values[rows]
        index_matrix = _window(chunk, grid, topk)
        probs = _softmax_rows(chunk, index_matrix, grid.step, sharpness)
        yield rows, index_matrix, probs


def soft_quantize(values: np.ndarray, grid: QuantGrid, sharpness: float,
                  topk: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                  with_grads: bool = True) -> SoftQuantization:
    """
    Apply Q_d element-wise, with partials and optional Q_p draws.

    Args:
        values: Tensor of inputs (any shape)
        grid: Reproduction grid
        sharpness: alpha (weights) or beta (activations)
        topk: Truncate each CPMF to its k largest masses
        rng: When given, also draw one Q_p sample per element
        with_grads: Compute dQd/dinput, dQd/dstep, dQd/dsharpness

    Returns:
        SoftQuantization: Arrays shaped like ``values``
    """
    values = np.asarray(values, dtype=np.float64)
    shape = values.shape
    flat = values.ravel()

    qd = np.empty(flat.size)
    d_input = np.empty(flat.size) if with_grads else None
    d_step = np.empty(flat.size) if with_grads else None
    d_sharpness = np.empty(flat.size) if with_grads else None
    indices = np.empty(flat.size, dtype=np.int64) if rng is not None else None

    for rows, index_matrix, probs in iter_cpmf_rows(flat, grid, sharpness, topk):
        chunk = flat[rows]
        mean, var, skew_u, third_central, centred = _row_moments(chunk, index_matrix, probs, grid)
        qd[rows] = mean

        if with_grads:
            distance = chunk[:, None] - index_matrix * grid.step
            d_input[rows] = 2.0 * sharpness * var
            d_step[rows] = (mean + 2.0 * sharpness * (chunk * var - skew_u)) / grid.step
            d_sharpness[rows] = -(probs * centred * distance * distance).sum(axis=1)

        if rng is not None:
            cdf = np.cumsum(probs, axis=1)
            u = rng.random(chunk.size) * cdf[:, -1]
            position = np.minimum((cdf <= u[:, None]).sum(axis=1), probs.shape[1] - 1)
            full_rows = np.broadcast_to(index_matrix, probs.shape)
            indices[rows] = full_rows[np.arange(chunk.size), position]

    return SoftQuantization(
        qd=qd.reshape(shape),
        d_input=d_input.reshape(shape) if with_grads else None,
        d_step=d_step.reshape(shape) if with_grads else None,
        d_sharpness=d_sharpness.reshape(shape) if with_grads else None,
        indices=indices.reshape(shape) if indices is not None else None,
    )


def make_cpmf(theta: float, grid: QuantGrid, sharpness: float) -> Cpmf:
    """
    Build the CPMF softmax(-sharpness * (theta - levels)^2) over a grid.

    Args:
        theta: Scalar input
        grid: Reproduction grid
        sharpness: Positive sharpness (alpha or beta)

    Returns:
        Cpmf: Probabilities over all 2^b levels

    Raises:
        QuantInputError: If theta is not finite
        QuantDomainError: If sharpness <= 0
    """
    if not math.isfinite(theta):
        raise QuantInputError(f"Quantizer input must be finite, got {theta}")
    _check_sharpness(sharpness)

    probs = _softmax_rows(np.array([float(theta)]), grid.indices[None, :], grid.step, sharpness)[0]
    return Cpmf(grid=grid, probs=probs, input=float(theta), sharpness=float(sharpness))


def sample_index(cpmf: Cpmf, rng: np.random.Generator) -> int:
    """
    Draw the grid index of one Q_p sample.

    Args:
        cpmf: Conditional PMF to draw from
        rng: Random stream (one uniform is consumed)

    Returns:
        int: Grid index of the drawn level
    """
    cdf = np.cumsum(cpmf.probs)
    position = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return cpmf.grid.min_index + min(position, cpmf.grid.size - 1)


def sample_qp(cpmf: Cpmf, rng: np.random.Generator) -> float:
    """Draw one Q_p value (a grid level) from the CPMF."""
    return sample_index(cpmf, rng) * cpmf.grid.step


def qd(cpmf: Cpmf) -> float:
    """Soft deterministic quantizer: the conditional mean Σ p_i * level_i."""
    return float(cpmf.probs @ cpmf.grid.levels)


def moments(cpmf: Cpmf) -> QuantMoments:
    """
    Mean, variance and Skew_u of Q_p given its input.

    Args:
        cpmf: Conditional PMF

    Returns:
        QuantMoments: var is clamped at 0 when rounding makes it slightly negative
    """
    mean, var, skew_u, _, _ = _row_moments(
        np.array([cpmf.input]), cpmf.grid.indices[None, :], cpmf.probs[None, :], cpmf.grid
    )
    return QuantMoments(mean=float(mean[0]), var=float(var[0]), skew_u=float(skew_u[0]))


def dqd_dtheta(cpmf: Cpmf) -> float:
    """dQd/dtheta = 2 * sharpness * Var{Q_p}; never negative."""
    return 2.0 * cpmf.sharpness * moments(cpmf).var


def dqd_dq(cpmf: Cpmf) -> float:
    """
    Partial of Q_d with respect to the grid step.

    (1/q) * (E{Q_p} + 2*sharpness*theta*Var{Q_p} - 2*sharpness*Skew_u{Q_p})

    Raises:
        QuantDomainError: If the grid step is not positive
    """
    step = cpmf.grid.step
    if step <= 0:
        raise QuantDomainError(f"Grid step must be positive, got {step}")
    m = moments(cpmf)
    return (m.mean + 2.0 * cpmf.sharpness * (cpmf.input * m.var - m.skew_u)) / step


def dqd_dsharpness(cpmf: Cpmf) -> float:
    """
    Partial of Q_d with respect to the sharpness.

    Equals -Cov(Q_p, (theta - Q_p)^2), i.e. sharpening moves the mean
    toward the levels closest to theta.
    """
    levels = cpmf.grid.levels
    mean = float(cpmf.probs @ levels)
    distance = cpmf.input - levels
    return float(-(cpmf.probs * (levels - mean) * distance * distance).sum())


def truncate_topk(cpmf: Cpmf, k: int) -> Cpmf:
    """
    Keep the k largest masses and renormalize them proportionally.

    Args:
        cpmf: Conditional PMF
        k: Number of masses to keep, 1 <= k <= 2^b

    Returns:
        Cpmf: Truncated PMF (ties resolved toward the lower grid index)

    Raises:
        QuantDomainError: If k is out of range
    """
    if not 1 <= k <= cpmf.grid.size:
        raise QuantDomainError(f"top-k must lie in [1, {cpmf.grid.size}], got {k}")

    keep = np.argsort(-cpmf.probs, kind="stable")[:k]
    probs = np.zeros_like(cpmf.probs)
    probs[keep] = cpmf.probs[keep]
    probs /= probs.sum()
    return Cpmf(grid=cpmf.grid, probs=probs, input=cpmf.input, sharpness=cpmf.sharpness)


def expected_distortion(cpmf: Cpmf) -> float:
    """E{(theta - Q_p)^2 | theta} by exhaustive summation over the grid."""
    distance = cpmf.input - cpmf.grid.levels
    return float((cpmf.probs * distance * distance).sum())


def hard_quantize(theta, grid: QuantGrid):
    """Uniform quantizer: nearest grid level, clipped to the grid span."""
    return grid.nearest_index(theta) * grid.step
