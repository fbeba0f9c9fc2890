"""
Marginal PMFs of randomly quantized populations and their entropy penalties.

A layer's MPMF is the average of the CPMFs of its elements; ``|w_l| * H``
of that average estimates the bits an entropy coder spends on the layer.
All entropies are in bits (log base 2).
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from cdl.constants import METRICS_SCHEMA_VERSION
from cdl.quant import QuantGrid, iter_cpmf_rows


logger = logging.getLogger(__name__)


class EntropyError(Exception):
    """Raised when an entropy estimate cannot be formed."""
    pass


@dataclass(frozen=True)
class Mpmf:
    """Marginal PMF of a quantized population over one grid."""

    grid: QuantGrid
    probs: np.ndarray
    population_size: int


@dataclass
class EntropyGradients:
    """Layer bits |values| * H(MPMF) and its gradients."""

    bits: float
    d_values: np.ndarray
    d_step: float
    d_sharpness: float


@dataclass
class ActivationEntropy:
    """Per-sample activation bits of one layer and their gradients."""

    bits: np.ndarray
    d_values: np.ndarray
    d_step: float
    d_sharpness: float


@dataclass
class EntropyReport:
    """Model-based bit estimates per layer and in total."""

    layer_names: list[str]
    weight_counts: list[int]
    per_layer_weight_bits: list[float]
    weight_bits_per_symbol: list[float]
    activation_counts: list[int] = field(default_factory=list)
    per_layer_activation_bits: list[float] = field(default_factory=list)
    activation_bits_per_symbol: list[float] = field(default_factory=list)

    @property
    def total_weight_bits(self) -> float:
        return float(sum(self.per_layer_weight_bits))

    @property
    def total_activation_bits(self) -> float:
        return float(sum(self.per_layer_activation_bits))

    @property
    def bits_per_weight(self) -> float:
        total = sum(self.weight_counts)
        return self.total_weight_bits / total if total else 0.0

    @property
    def bits_per_activation(self) -> float:
        total = sum(self.activation_counts)
        return self.total_activation_bits / total if total else float("nan")

    def to_dict(self) -> dict[str, Any]:
        """
        Serialize for the JSON metrics log.

        Returns:
            dict: Report fields plus totals and schema_version
        """
        return {
            "schema_version": METRICS_SCHEMA_VERSION,
            "layer_names": list(self.layer_names),
            "weight_counts": list(self.weight_counts),
            "per_layer_weight_bits": list(self.per_layer_weight_bits),
            "weight_bits_per_symbol": list(self.weight_bits_per_symbol),
            "activation_counts": list(self.activation_counts),
            "per_layer_activation_bits": list(self.per_layer_activation_bits),
            "activation_bits_per_symbol": list(self.activation_bits_per_symbol),
            "total_weight_bits": self.total_weight_bits,
            "total_activation_bits": self.total_activation_bits,
        }


def _entropy_bits(probs: np.ndarray) -> np.ndarray:
    """-Σ p log2 p along the last axis, with 0 log 0 = 0."""
    safe = np.where(probs > 0, probs, 1.0)
    return np.maximum(-(probs * np.log2(safe)).sum(axis=-1), 0.0)


def _score(probs: np.ndarray) -> np.ndarray:
    """-log2 of marginal masses; zero where the mass is zero (no row reaches it)."""
    safe = np.where(probs > 0, probs, 1.0)
    return np.where(probs > 0, -np.log2(safe), 0.0)


def layer_mpmf(values: np.ndarray, grid: QuantGrid, sharpness: float, topk: Optional[int] = None) -> Mpmf:
    """
    Average the (optionally top-k truncated) CPMFs of a population.

    Args:
        values: Population of inputs (any shape, flattened)
        grid: Reproduction grid
        sharpness: alpha or beta
        topk: Truncation applied to each CPMF

    Returns:
        Mpmf: Marginal PMF over the grid

    Raises:
        EntropyError: If values is empty
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise EntropyError("Cannot form an MPMF of an empty population")

    totals = np.zeros(grid.size)
    for _, index_matrix, probs in iter_cpmf_rows(flat, grid, sharpness, topk):
        slots = np.broadcast_to(index_matrix - grid.min_index, probs.shape)
        totals += np.bincount(slots.ravel(), weights=probs.ravel(), minlength=grid.size)

    return Mpmf(grid=grid, probs=totals / flat.size, population_size=int(flat.size))


def shannon_entropy(mpmf: Mpmf) -> float:
    """Entropy of an MPMF in bits per symbol."""
    return float(_entropy_bits(mpmf.probs))


def entropy_penalty_gradients(values: np.ndarray, grid: QuantGrid, sharpness: float,
                              topk: Optional[int] = None) -> EntropyGradients:
    """
    Exact gradients of |values| * H(MPMF) w.r.t. values, step and sharpness.

    With P the MPMF, d(nH)/dp_ik = -log2 P_k - 1/ln 2 for every element i;
    the constant vanishes against the softmax Jacobian, leaving a
    per-element covariance between the score -log2 P and the logit partials.

    Args:
        values: Population (any shape)
        grid: Reproduction grid
        sharpness: alpha or beta
        topk: Truncation applied to each CPMF

    Returns:
        EntropyGradients: bits plus gradients (d_values shaped like values)
    """
    values = np.asarray(values, dtype=np.float64)
    flat = values.ravel()
    mpmf = layer_mpmf(flat, grid, sharpness, topk)
    score = _score(mpmf.probs)

    d_values = np.empty(flat.size)
    d_step = 0.0
    d_sharpness = 0.0

    for rows, index_matrix, probs in iter_cpmf_rows(flat, grid, sharpness, topk):
        chunk = flat[rows]
        levels = index_matrix * grid.step
        g = score[index_matrix - grid.min_index]
        centred = g - (probs * g).sum(axis=1, keepdims=True)
        weighted = probs * centred
        distance = chunk[:, None] - levels

        d_values[rows] = 2.0 * sharpness * (weighted * levels).sum(axis=1)
        d_step += 2.0 * sharpness / grid.step * float((weighted * distance * levels).sum())
        d_sharpness -= float((weighted * distance * distance).sum())

    bits = flat.size * shannon_entropy(mpmf)
    return EntropyGradients(bits=bits, d_values=d_values.reshape(values.shape),
                            d_step=d_step, d_sharpness=d_sharpness)


def activation_entropy_terms(batch: np.ndarray, grid: QuantGrid, sharpness: float,
                             topk: Optional[int] = None, with_grads: bool = True) -> ActivationEntropy:
    """
    Per-sample activation bits |x_l| * H(MPMF of that sample) and gradients.

    Each sample's MPMF is formed over its own activations; d_step and
    d_sharpness are summed over the batch.

    Args:
        batch: Activations shaped (batch, ...) before quantization
        grid: Activation grid
        sharpness: beta
        topk: Truncation applied to each CPMF
        with_grads: Skip the gradient pass when False

    Returns:
        ActivationEntropy: bits per sample (batch,), d_values shaped like batch
    """
    batch = np.asarray(batch, dtype=np.float64)
    samples = batch.shape[0]
    per_sample = batch.reshape(samples, -1)
    count = per_sample.shape[1]
    if count == 0:
        raise EntropyError("Cannot form an MPMF of an empty activation vector")
    flat = per_sample.ravel()

    # First pass: per-sample marginals
    totals = np.zeros(samples * grid.size)
    for rows, index_matrix, probs in iter_cpmf_rows(flat, grid, sharpness, topk):
        owner = np.arange(rows.start, rows.stop) // count
        slots = owner[:, None] * grid.size + (index_matrix - grid.min_index)
        totals += np.bincount(slots.ravel(), weights=probs.ravel(), minlength=totals.size)
    marginals = totals.reshape(samples, grid.size) / count
    bits = count * _entropy_bits(marginals)

    if not with_grads:
        return ActivationEntropy(bits=bits, d_values=np.zeros_like(batch), d_step=0.0, d_sharpness=0.0)

    # Second pass: covariance of the score with the logit partials
    score = _score(marginals)
    d_values = np.empty(flat.size)
    d_step = 0.0
    d_sharpness = 0.0
    for rows, index_matrix, probs in iter_cpmf_rows(flat, grid, sharpness, topk):
        chunk = flat[rows]
        owner = np.arange(rows.start, rows.stop) // count
        slots = np.broadcast_to(index_matrix - grid.min_index, probs.shape)
        g = score[owner[:, None], slots]
        centred = g - (probs * g).sum(axis=1, keepdims=True)
        weighted = probs * centred
        levels = index_matrix * grid.step
        distance = chunk[:, None] - levels

        d_values[rows] = 2.0 * sharpness * (weighted * levels).sum(axis=1)
        d_step += 2.0 * sharpness / grid.step * float((weighted * distance * levels).sum())
        d_sharpness -= float((weighted * distance * distance).sum())

    return ActivationEntropy(bits=bits, d_values=d_values.reshape(batch.shape),
                             d_step=d_step, d_sharpness=d_sharpness)


def entropy_report(model, activations: Optional[dict[int, np.ndarray]] = None,
                   topk: Optional[int] = None, include_activations: bool = True) -> EntropyReport:
    """
    Bit estimates H(w_l), H(x_l) for every quantized layer of a model.

    Args:
        model: Model whose weighted layers carry quantizer parameters
        activations: Weighted-layer ordinal -> activations (batch, ...) before
            quantization, collected from at least one forward batch
        topk: Truncation applied to activation CPMFs
        include_activations: Compute activation entropies

    Returns:
        EntropyReport: Per-layer and total bits

    Raises:
        EntropyError: If activation entropies are requested without statistics
    """
    names, weight_counts, weight_bits, weight_symbol_bits = [], [], [], []
    activation_counts, activation_bits, activation_symbol_bits = [], [], []

    if include_activations and activations is None:
        raise EntropyError("Activation statistics are required for activation entropies")

    for ordinal, layer in enumerate(model.weighted_layers()):
        quant = layer.quant
        mpmf = layer_mpmf(layer.weight, quant.weight_grid, quant.alpha)
        per_symbol = shannon_entropy(mpmf)
        names.append(layer.name)
        weight_counts.append(mpmf.population_size)
        weight_symbol_bits.append(per_symbol)
        weight_bits.append(mpmf.population_size * per_symbol)

        if include_activations and quant.quantize_activations:
            if ordinal not in activations:
                raise EntropyError(f"Missing activation statistics for layer {layer.name}")
            batch = activations[ordinal]
            terms = activation_entropy_terms(batch, quant.activation_grid, quant.beta, topk, with_grads=False)
            count = int(np.prod(batch.shape[1:]))
            activation_counts.append(count)
            activation_bits.append(float(terms.bits.mean()))
            activation_symbol_bits.append(float(terms.bits.mean()) / count)

    return EntropyReport(
        layer_names=names,
        weight_counts=weight_counts,
        per_layer_weight_bits=weight_bits,
        weight_bits_per_symbol=weight_symbol_bits,
        activation_counts=activation_counts,
        per_layer_activation_bits=activation_bits,
        activation_bits_per_symbol=activation_symbol_bits,
    )
