"""
Network model, execution modes and the proxy-gradient chain rule.

Three modes share one forward/backward path:

- ``fp``: plain full-precision network.
- ``cdl``: weights replaced by one Q_p draw per mini-batch, activations
  after each hidden ReLU replaced by per-element Q_p draws.
- ``rcdl``: both replaced by Q_d.

Backward always uses the Q_d partials as the quantizer Jacobian. In ``cdl``
mode the loss-side factor comes from the sampled forward pass, which is the
hybrid rule; in ``rcdl`` mode the result is the exact gradient.
"""

import copy
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from cdl.constants import DEFAULT_BITS
from cdl.net.layers import WEIGHTED_KINDS, Conv2d, Dense, Flatten, ReLU
from cdl.quant import soft_quantize


logger = logging.getLogger(__name__)


class ShapeError(Exception):
    """Raised when layer or input shapes do not line up."""
    pass


class ModeError(Exception):
    """Raised when a mode is unknown, unsupported by the model state, or mismatched."""
    pass


class LabelError(Exception):
    """Raised when a class label is out of range or missing."""
    pass


class NonFiniteError(Exception):
    """Raised when an intermediate tensor contains NaN or inf."""
    pass


class Mode(str, Enum):
    FP = "fp"
    CDL = "cdl"
    RCDL = "rcdl"


class Model:
    """Ordered layers with full-precision master weights."""

    def __init__(self, layers: list, input_shape: tuple[int, ...], bits: int = DEFAULT_BITS):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.bits = bits

        # Step: propagate shapes and locate activation quantization points
        self.shapes: list[tuple[int, ...]] = []
        self.ordinal_of: dict[int, int] = {}
        self.activation_points: dict[int, int] = {}
        shape = self.input_shape
        ordinal = -1
        for index, layer in enumerate(layers):
            if layer.kind == "dense" and shape != (layer.in_features,):
                raise ShapeError(f"{layer.name} expects ({layer.in_features},), got {shape}")
            if layer.kind == "conv2d" and (len(shape) != 3 or shape[0] != layer.in_channels):
                raise ShapeError(f"{layer.name} expects {layer.in_channels} input channels, got {shape}")
            if layer.kind in WEIGHTED_KINDS:
                ordinal += 1
                self.ordinal_of[index] = ordinal
            elif layer.kind == "relu" and index > 0 and layers[index - 1].kind in WEIGHTED_KINDS:
                self.activation_points[index] = ordinal
            shape = layer.output_shape(shape)
            self.shapes.append(shape)

        self.num_classes = int(shape[0])

    def weighted_layers(self) -> list:
        return [layer for layer in self.layers if layer.kind in WEIGHTED_KINDS]

    def activation_shape(self, ordinal: int) -> Optional[tuple[int, ...]]:
        """Per-sample shape of the quantized activations after weighted layer ``ordinal``."""
        for index, point in self.activation_points.items():
            if point == ordinal:
                return self.shapes[index]
        return None

    def parameter_count(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.weighted_layers())

    def has_quant_params(self) -> bool:
        return all(layer.quant is not None for layer in self.weighted_layers())

    def clone(self) -> "Model":
        return copy.deepcopy(self)


@dataclass
class WeightQuant:
    """Effective weights of one layer for one mini-batch, plus Q_d partials."""

    values: np.ndarray
    indices: Optional[np.ndarray] = None
    d_input: Optional[np.ndarray] = None
    d_step: Optional[np.ndarray] = None
    d_sharpness: Optional[np.ndarray] = None


@dataclass
class ActivationQuant:
    """Activations after one hidden ReLU, before and after quantization."""

    ordinal: int
    pre: np.ndarray
    values: np.ndarray
    indices: Optional[np.ndarray] = None
    d_input: Optional[np.ndarray] = None
    d_step: Optional[np.ndarray] = None
    d_sharpness: Optional[np.ndarray] = None


@dataclass
class ForwardTrace:
    mode: Mode
    caches: list
    weights: list[WeightQuant]
    activations: dict[int, ActivationQuant]
    logits: np.ndarray
    loss: Optional[float] = None
    dlogits: Optional[np.ndarray] = None


@dataclass
class LayerGradients:
    weight: np.ndarray
    bias: np.ndarray
    q: float = 0.0
    s: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0


@dataclass
class ModelGradients:
    """Gradients of one scalar objective w.r.t. every trainable parameter."""

    layers: list[LayerGradients] = field(default_factory=list)

    @classmethod
    def zeros(cls, model: Model) -> "ModelGradients":
        return cls([LayerGradients(np.zeros_like(layer.weight), np.zeros_like(layer.bias))
                    for layer in model.weighted_layers()])

    def all_finite(self) -> bool:
        for grads in self.layers:
            if not (np.all(np.isfinite(grads.weight)) and np.all(np.isfinite(grads.bias))):
                return False
            if not np.all(np.isfinite([grads.q, grads.s, grads.alpha, grads.beta])):
                return False
        return True


def _check_labels(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(f"Labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """
    Mean softmax cross-entropy over a batch and its gradient.

    Args:
        logits: (batch, classes)
        labels: (batch,) class indices

    Returns:
        tuple: (mean loss, d loss / d logits)

    Raises:
        LabelError: If a label is out of range
    """
    batch, classes = logits.shape
    labels = _check_labels(labels, classes)

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_norm[:, None]
    rows = np.arange(batch)
    loss = float(-log_probs[rows, labels].mean())

    dlogits = np.exp(log_probs)
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / batch


def loss_ce(logits: np.ndarray, label: int) -> float:
    """Softmax cross-entropy of one logit vector against one class index."""
    logits = np.asarray(logits, dtype=np.float64)
    label = int(_check_labels(np.array([label]), logits.size)[0])
    peak = logits.max()
    return float(peak + np.log(np.exp(logits - peak).sum()) - logits[label])


def quantize_weights(model: Model, mode: Mode, rng: Optional[np.random.Generator] = None,
                     with_grads: bool = True) -> list[WeightQuant]:
    """
    Effective weights of every weighted layer for one mini-batch.

    Args:
        model: Model with master weights (and quantizer state unless fp)
        mode: Execution mode
        rng: Random stream for the Q_p draws (cdl mode only)
        with_grads: Also return the Q_d partials needed by backward

    Returns:
        list[WeightQuant]: One entry per weighted layer

    Raises:
        ModeError: If quantizer state is missing or cdl mode has no rng
    """
    mode = Mode(mode)
    if mode == Mode.FP:
        return [WeightQuant(values=layer.weight) for layer in model.weighted_layers()]
    if not model.has_quant_params():
        raise ModeError(f"Mode {mode.value} needs initialized quantizer parameters")
    if mode == Mode.CDL and rng is None:
        raise ModeError("cdl mode needs a random stream")

    result = []
    for layer in model.weighted_layers():
        quant = layer.quant
        soft = soft_quantize(layer.weight, quant.weight_grid, quant.alpha,
                             rng=rng if mode == Mode.CDL else None, with_grads=with_grads)
        values = soft.indices * quant.q if mode == Mode.CDL else soft.qd
        result.append(WeightQuant(values=values, indices=soft.indices, d_input=soft.d_input,
                                  d_step=soft.d_step, d_sharpness=soft.d_sharpness))
    return result


def forward(model: Model, x: np.ndarray, mode: Mode, rng: Optional[np.random.Generator] = None,
            weights: Optional[list[WeightQuant]] = None, labels: Optional[np.ndarray] = None,
            topk: Optional[int] = None, with_grads: bool = True) -> ForwardTrace:
    """
    Run the network on a batch in the requested mode.

    Args:
        model: Model to run
        x: Input batch shaped (batch, *model.input_shape)
        mode: fp, cdl or rcdl
        rng: Random stream for Q_p draws (cdl mode)
        weights: Pre-quantized weights; drawn from the masters when None
        labels: When given, the loss and its logit gradient are attached
        topk: Truncation of the activation CPMFs
        with_grads: Keep the Q_d partials needed by backward

    Returns:
        ForwardTrace: Everything backward needs

    Raises:
        ShapeError: If x does not match the model input
        NonFiniteError: If an intermediate tensor is not finite
    """
    mode = Mode(mode)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"Model expects inputs shaped (batch, {model.input_shape}), got {x.shape}")
    if weights is None:
        weights = quantize_weights(model, mode, rng, with_grads)

    caches = []
    activations: dict[int, ActivationQuant] = {}
    out = x
    for index, layer in enumerate(model.layers):
        if layer.kind in WEIGHTED_KINDS:
            out, cache = layer.forward(out, weights[model.ordinal_of[index]].values)
            if not np.all(np.isfinite(out)):
                raise NonFiniteError(f"Non-finite output at layer {layer.name}")
            caches.append(cache)
            continue

        out, cache = layer.forward(out)
        caches.append(cache)

        ordinal = model.activation_points.get(index)
        if ordinal is None:
            continue
        quant = model.weighted_layers()[ordinal].quant
        if mode == Mode.FP or quant is None or not quant.quantize_activations:
            activations[ordinal] = ActivationQuant(ordinal=ordinal, pre=out, values=out)
            continue

        soft = soft_quantize(out, quant.activation_grid, quant.beta, topk=topk,
                             rng=rng if mode == Mode.CDL else None, with_grads=with_grads)
        values = soft.indices * quant.s if mode == Mode.CDL else soft.qd
        activations[ordinal] = ActivationQuant(ordinal=ordinal, pre=out, values=values, indices=soft.indices,
                                               d_input=soft.d_input, d_step=soft.d_step,
                                               d_sharpness=soft.d_sharpness)
        out = values

    trace = ForwardTrace(mode=mode, caches=caches, weights=weights, activations=activations, logits=out)
    if labels is not None:
        trace.loss, trace.dlogits = softmax_cross_entropy(out, labels)
    return trace


def backward(trace: ForwardTrace, model: Model, mode: Optional[Mode] = None,
             activation_grads: Optional[dict[int, np.ndarray]] = None) -> ModelGradients:
    """
    Backpropagate the loss of a trace through layers and quantizers.

    Args:
        trace: Trace produced by forward with labels
        model: The model that produced it
        mode: Expected mode; must match the trace when given
        activation_grads: Extra gradients w.r.t. pre-quantization activations
            (weighted-layer ordinal -> array shaped like the activations),
            e.g. from an activation entropy penalty

    Returns:
        ModelGradients: Gradients for w, bias, q, s, alpha, beta

    Raises:
        ModeError: On a mode mismatch
        LabelError: If the trace carries no loss gradient
    """
    if mode is not None and Mode(mode) != trace.mode:
        raise ModeError(f"Trace was produced in {trace.mode.value} mode, not {Mode(mode).value}")
    if trace.dlogits is None:
        raise LabelError("Forward trace has no labels; nothing to backpropagate")

    quantized = trace.mode != Mode.FP
    grads = ModelGradients.zeros(model)
    activation_grads = activation_grads or {}

    dout = trace.dlogits
    for index in reversed(range(len(model.layers))):
        layer = model.layers[index]
        cache = trace.caches[index]

        if layer.kind in WEIGHTED_KINDS:
            ordinal = model.ordinal_of[index]
            effective = trace.weights[ordinal]
            dout, d_weight, d_bias = layer.backward(dout, cache, effective.values)
            slot = grads.layers[ordinal]
            slot.bias = d_bias
            if quantized:
                slot.weight = d_weight * effective.d_input
                slot.q = float((d_weight * effective.d_step).sum())
                slot.alpha = float((d_weight * effective.d_sharpness).sum())
            else:
                slot.weight = d_weight
            continue

        ordinal = model.activation_points.get(index)
        if ordinal is not None:
            record = trace.activations.get(ordinal)
            if record is not None and record.d_input is not None:
                slot = grads.layers[ordinal]
                slot.s = float((dout * record.d_step).sum())
                slot.beta = float((dout * record.d_sharpness).sum())
                dout = dout * record.d_input
            if ordinal in activation_grads:
                dout = dout + activation_grads[ordinal]

        dout = layer.backward(dout, cache)

    return grads


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def build_model(name: str, input_shape: tuple[int, ...], classes: int, rng: np.random.Generator,
                bits: int = DEFAULT_BITS, exempt_first_last: bool = True, hidden: Optional[int] = None) -> Model:
    """
    Build one of the desk-scale architectures with He-normal weights.

    Args:
        name: mlp (flatten, dense->128, relu, dense), cnn (two stride-2 3x3
            convs with 8 and 16 channels, dense) or tiny (flatten, dense->8,
            relu, dense)
        input_shape: Per-sample input shape (channels, height, width)
        classes: Number of output classes
        rng: Initialization stream
        bits: Default bit-width of the quantizers
        exempt_first_last: Mark the first and last weighted layers for 8 bits
        hidden: Override the hidden width of mlp/tiny

    Returns:
        Model: Freshly initialized model without quantizer state

    Raises:
        ModeError: If the architecture name is unknown
    """
    features = int(np.prod(input_shape))
    if name == "mlp":
        width = hidden or 128
        layers = [Flatten(), Dense(features, width, name="dense0"), ReLU(), Dense(width, classes, name="dense1")]
    elif name == "tiny":
        width = hidden or 8
        layers = [Flatten(), Dense(features, width, name="dense0"), ReLU(), Dense(width, classes, name="dense1")]
    elif name == "cnn":
        channels = input_shape[0]
        conv0 = Conv2d(channels, 8, 3, stride=2, padding="same", name="conv0")
        after0 = conv0.output_shape(tuple(input_shape))
        conv1 = Conv2d(8, 16, 3, stride=2, padding="same", name="conv1")
        after1 = conv1.output_shape(after0)
        layers = [conv0, ReLU(), conv1, ReLU(), Flatten(), Dense(int(np.prod(after1)), classes, name="dense2")]
    else:
        raise ModeError(f"Unknown architecture '{name}'")

    weighted = [layer for layer in layers if layer.kind in WEIGHTED_KINDS]
    for layer in weighted:
        layer.weight = _he_normal(rng, layer.weight.shape, layer.fan_in)
    if exempt_first_last:
        weighted[0].exempt_8bit = True
        weighted[-1].exempt_8bit = True

    for position, layer in enumerate(layers):
        if layer.kind in ("relu", "flatten"):
            layer.name = f"{layer.kind}{position}"

    model = Model(layers, input_shape, bits)
    logger.debug(f"Built {name} model with {model.parameter_count()} parameters")
    return model
