"""
Entropy-constrained training of quantized networks.

Each mini-batch minimizes

    J_B = mean cross-entropy + lam * H(w) / N_w + gamma * mean_n H(x_n) / N_x

jointly over weights, biases, step sizes q and s, and sharpness values
alpha and beta. With ``penalty_normalization="mean"`` N_w and N_x are the
weight and per-sample activation counts, so the penalties are bits per
symbol; with ``"total"`` they are 1 and the penalties are raw bit totals.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from cdl.codec.container import avg_bits_metrics
from cdl.config import ConfigError, TrainConfig
from cdl.constants import ABORT_SNAPSHOT, CHECKPOINT_FILE, EXEMPT_BITS
from cdl.datasets import Dataset, iterate_minibatches
from cdl.entropy import activation_entropy_terms, entropy_penalty_gradients, entropy_report
from cdl.metrics import EpochMetrics, MetricsLog, pareto_frontier, weight_histograms, write_table
from cdl.net.checkpoint import load_checkpoint, save_checkpoint
from cdl.net.layers import LayerQuantParams
from cdl.net.model import (
    ForwardTrace,
    Mode,
    Model,
    ModelGradients,
    NonFiniteError,
    backward,
    build_model,
    forward,
    quantize_weights,
)
from cdl.optim import MomentumSGD
from cdl.quant import QuantizationError
from cdl.utils import make_rng


logger = logging.getLogger(__name__)

# Random stream ids under the run seed
DATA_STREAM = 0
QUANT_STREAM = 1
INIT_STREAM = 2
METRICS_STREAM = 3


class TrainingAborted(Exception):
    """Raised when training hits a non-finite value; carries the snapshot path."""

    def __init__(self, message: str, snapshot_path: Optional[Path] = None):
        super().__init__(message)
        self.snapshot_path = snapshot_path


@dataclass
class ObjectiveResult:
    objective: float
    loss: float
    weight_bits: float
    activation_bits: float
    trace: ForwardTrace
    grads: Optional[ModelGradients] = None


@dataclass
class StepInfo:
    """What observers see after each optimizer step."""

    epoch: int
    step: int
    inputs: np.ndarray
    labels: np.ndarray
    result: ObjectiveResult


@dataclass
class TrainState:
    model: Model
    config: TrainConfig
    optimizer: MomentumSGD
    data_rng: np.random.Generator
    quant_rng: np.random.Generator
    run_dir: Optional[Path] = None
    epoch: int = 0
    step: int = 0
    history: list[EpochMetrics] = field(default_factory=list)


class TrainingObserver(Protocol):
    def on_step(self, state: TrainState, info: StepInfo) -> None: ...

    def on_epoch_end(self, state: TrainState, metrics: EpochMetrics) -> None: ...


def run_name(config: TrainConfig) -> str:
    """Directory name of a run; distinct for every mode, bit-width, penalty pair and seed."""
    return f"{config.mode}_b{config.bits}_lambda{config.lam:g}_gamma{config.gamma:g}_seed{config.seed}"


def base_rates(config: TrainConfig) -> dict[str, float]:
    return {"w": config.lr_w, "q": config.lr_q, "s": config.lr_s, "alpha": config.lr_alpha, "beta": config.lr_beta}


def scaled_lr(layer: LayerQuantParams, kind: str, rates: dict[str, float], bits: Optional[int] = None) -> float:
    """
    Layer-wise learning rate for one parameter group.

    q: rate / sqrt(|w_l| 2^(b-1)); s: rate / sqrt(|x_l| 2^b);
    alpha: rate / sqrt(|w_l|); beta: rate / sqrt(|x_l|); w: unscaled.

    Args:
        layer: Quantizer state carrying |w_l|, |x_l| and b
        kind: One of w, q, s, alpha, beta
        rates: Base rates keyed by kind
        bits: Override of the layer bit-width

    Returns:
        float: Scaled rate
    """
    bits = layer.bits if bits is None else bits
    weights = max(layer.weight_count, 1)
    activations = max(layer.activation_count, 1)
    if kind == "w":
        return rates["w"]
    if kind == "q":
        return rates["q"] / math.sqrt(weights * 2 ** (bits - 1))
    if kind == "s":
        return rates["s"] / math.sqrt(activations * 2 ** bits)
    if kind == "alpha":
        return rates["alpha"] / math.sqrt(weights)
    if kind == "beta":
        return rates["beta"] / math.sqrt(activations)
    raise ValueError(f"Unknown parameter kind '{kind}'")


def lr_scale(epoch_index: int, config: TrainConfig) -> float:
    """Decay factor for a zero-based epoch: lr_decay^(milestones already reached)."""
    reached = sum(1 for milestone in config.lr_milestones if epoch_index >= milestone * config.epochs)
    return config.lr_decay ** reached


def _initial_step(mean_abs: float, bits: int, label: str) -> float:
    if not (math.isfinite(mean_abs) and mean_abs > 0):
        fallback = 1.0 / 2 ** (bits - 1)
        logger.warning(f"Mean magnitude of {label} is zero; falling back to step {fallback}")
        return fallback
    return 2.0 * mean_abs / math.sqrt(2 ** (bits - 1))


def init_quant_params(model: Model, first_batch: np.ndarray, bits: int,
                      sharpness: float = 500.0) -> list[LayerQuantParams]:
    """
    Initialize every layer's quantizer from its own magnitudes.

    q = 2 mean|w_l| / sqrt(2^(b-1)), s = 2 mean|x_l| / sqrt(2^(b-1)) with
    x_l from a full-precision pass over ``first_batch``; alpha = beta =
    ``sharpness``. Layers marked exempt get 8 bits.

    Args:
        model: Model with initialized weights
        first_batch: Inputs of one mini-batch
        bits: Bit-width of non-exempt layers
        sharpness: Initial alpha and beta

    Returns:
        list[LayerQuantParams]: Also attached to the layers
    """
    trace = forward(model, first_batch, Mode.FP, with_grads=False)
    params = []
    for ordinal, layer in enumerate(model.weighted_layers()):
        layer_bits = EXEMPT_BITS if layer.exempt_8bit else bits
        q = _initial_step(float(np.abs(layer.weight).mean()), layer_bits, f"{layer.name} weights")

        record = trace.activations.get(ordinal)
        if record is not None:
            s = _initial_step(float(np.abs(record.pre).mean()), layer_bits, f"{layer.name} activations")
            count = int(np.prod(record.pre.shape[1:]))
        else:
            s, count = 1.0, 0

        layer.quant = LayerQuantParams.from_values(q, s, sharpness, sharpness, layer_bits,
                                                   quantize_activations=record is not None,
                                                   weight_count=int(layer.weight.size), activation_count=count)
        params.append(layer.quant)
        logger.debug(f"{layer.name}: b={layer_bits} q={q:.4g} s={s:.4g}")
    return params


def penalty_norms(model: Model, config: TrainConfig) -> tuple[float, float]:
    """Divisors of H(w) and H(x) under the configured normalization."""
    if config.penalty_normalization == "total":
        return 1.0, 1.0
    layers = model.weighted_layers()
    weights = sum(layer.weight.size for layer in layers)
    activations = sum(layer.quant.activation_count for layer in layers
                      if layer.quant is not None and layer.quant.quantize_activations)
    return float(max(weights, 1)), float(max(activations, 1))


def objective_and_gradients(model: Model, x: np.ndarray, y: np.ndarray, config: TrainConfig,
                            rng: Optional[np.random.Generator] = None, mode: Optional[Mode] = None,
                            with_grads: bool = True) -> ObjectiveResult:
    """
    Evaluate J_B on a mini-batch and, optionally, all five gradient groups.

    The weight entropy term uses the master weights; the activation term
    uses this batch's pre-quantization activations.

    Args:
        model: Model (quantizer state required unless mode is fp)
        x: Inputs
        y: Labels
        config: Supplies lam, gamma, normalization and top-k
        rng: Stream for Q_p draws (cdl)
        mode: Overrides config.mode
        with_grads: Skip backward when False

    Returns:
        ObjectiveResult: Objective value, its parts and gradients
    """
    mode = Mode(mode or config.mode)
    quantized = mode != Mode.FP
    weighted = model.weighted_layers()
    w_norm, x_norm = penalty_norms(model, config)
    batch = x.shape[0]

    weights = quantize_weights(model, mode, rng, with_grads=with_grads)
    trace = forward(model, x, mode, rng=rng, weights=weights, labels=y, topk=config.activation_topk,
                    with_grads=with_grads)
    objective = trace.loss

    # Step 1: activation entropy, per sample then averaged over the batch
    activation_bits = 0.0
    activation_grads: dict[int, np.ndarray] = {}
    activation_extra: dict[int, tuple[float, float]] = {}
    if quantized and config.gamma > 0:
        scale = config.gamma / x_norm / batch
        for ordinal, record in sorted(trace.activations.items()):
            quant = weighted[ordinal].quant
            if not quant.quantize_activations:
                continue
            terms = activation_entropy_terms(record.pre, quant.activation_grid, quant.beta,
                                             config.activation_topk, with_grads=with_grads)
            activation_bits += float(terms.bits.mean())
            if with_grads:
                activation_grads[ordinal] = scale * terms.d_values
                activation_extra[ordinal] = (scale * terms.d_step, scale * terms.d_sharpness)
        objective += config.gamma * activation_bits / x_norm

    # Step 2: weight entropy of the master weights
    weight_bits = 0.0
    weight_terms = {}
    if quantized and config.lam > 0:
        for ordinal, layer in enumerate(weighted):
            terms = entropy_penalty_gradients(layer.weight, layer.quant.weight_grid, layer.quant.alpha)
            weight_bits += terms.bits
            weight_terms[ordinal] = terms
        objective += config.lam * weight_bits / w_norm

    result = ObjectiveResult(objective=float(objective), loss=float(trace.loss), weight_bits=weight_bits,
                             activation_bits=activation_bits, trace=trace)
    if not with_grads:
        return result

    # Step 3: chain rule through the network, then add the penalty terms
    grads = backward(trace, model, activation_grads=activation_grads)
    for ordinal, (d_step, d_sharpness) in activation_extra.items():
        grads.layers[ordinal].s += d_step
        grads.layers[ordinal].beta += d_sharpness
    weight_scale = config.lam / w_norm
    for ordinal, terms in weight_terms.items():
        slot = grads.layers[ordinal]
        slot.weight = slot.weight + weight_scale * terms.d_values
        slot.q += weight_scale * terms.d_step
        slot.alpha += weight_scale * terms.d_sharpness

    result.grads = grads
    return result


def apply_update(state: TrainState, grads: ModelGradients, scale: float = 1.0) -> None:
    """
    One SGD+momentum step on every parameter group.

    Quantizer parameters live in log space, so their gradients are
    multiplied by the parameter value before the step. Weight decay applies
    to weights only.
    """
    model, optimizer = state.model, state.optimizer
    rates = {kind: rate * scale for kind, rate in base_rates(state.config).items()}
    quantized = Mode(state.config.mode) != Mode.FP

    for layer, layer_grads in zip(model.weighted_layers(), grads.layers):
        layer.weight = optimizer.step(f"{layer.name}.weight", layer.weight, layer_grads.weight, rates["w"], decay=True)
        layer.bias = optimizer.step(f"{layer.name}.bias", layer.bias, layer_grads.bias, rates["w"])
        quant = layer.quant
        if not quantized or quant is None:
            continue
        quant.log_q = float(optimizer.step(f"{layer.name}.log_q", quant.log_q, quant.q * layer_grads.q,
                                           scaled_lr(quant, "q", rates)))
        quant.log_alpha = float(optimizer.step(f"{layer.name}.log_alpha", quant.log_alpha,
                                               quant.alpha * layer_grads.alpha, scaled_lr(quant, "alpha", rates)))
        if quant.quantize_activations:
            quant.log_s = float(optimizer.step(f"{layer.name}.log_s", quant.log_s, quant.s * layer_grads.s,
                                               scaled_lr(quant, "s", rates)))
            quant.log_beta = float(optimizer.step(f"{layer.name}.log_beta", quant.log_beta,
                                                  quant.beta * layer_grads.beta, scaled_lr(quant, "beta", rates)))


def _abort(state: TrainState, reason: str) -> None:
    snapshot = None
    if state.run_dir is not None:
        snapshot = state.run_dir / ABORT_SNAPSHOT
        save_checkpoint(state.model, snapshot, metadata={"epoch": state.epoch, "step": state.step, "reason": reason})
    logger.error(f"Training aborted at epoch {state.epoch}, step {state.step}: {reason}")
    raise TrainingAborted(f"{reason} (epoch {state.epoch}, step {state.step})", snapshot)


def train_epoch(state: TrainState, x: np.ndarray, y: np.ndarray, scale: float = 1.0,
                observers: Sequence[TrainingObserver] = ()) -> tuple[float, float]:
    """
    One pass over the training split.

    Per mini-batch: draw the weight quantization once, run forward and
    backward, add the entropy penalty gradients and update everything.

    Returns:
        tuple: (mean training loss, mean training objective)

    Raises:
        TrainingAborted: On a non-finite objective or gradient
    """
    losses, objectives = [], []
    for inputs, labels in iterate_minibatches(x, y, state.config.batch_size, state.data_rng):
        try:
            result = objective_and_gradients(state.model, inputs, labels, state.config, rng=state.quant_rng)
        except (NonFiniteError, QuantizationError) as e:
            _abort(state, f"Numerical failure: {e}")
        if not math.isfinite(result.objective) or not result.grads.all_finite():
            _abort(state, f"Non-finite objective {result.objective} or gradient")

        apply_update(state, result.grads, scale)
        state.step += 1
        losses.append(result.loss)
        objectives.append(result.objective)

        info = StepInfo(epoch=state.epoch, step=state.step, inputs=inputs, labels=labels, result=result)
        for observer in observers:
            observer.on_step(state, info)

    return float(np.mean(losses)), float(np.mean(objectives))


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, mode: Mode, rng: Optional[np.random.Generator] = None,
             batch_size: int = 256, topk: Optional[int] = None) -> float:
    """
    Top-1 accuracy in the given mode.

    cdl draws one weight quantization for the whole pass and fresh
    activation draws per sample; rcdl uses Q_d.
    """
    mode = Mode(mode)
    weights = quantize_weights(model, mode, rng, with_grads=False)
    correct = 0
    for inputs, labels in iterate_minibatches(x, y, batch_size):
        trace = forward(model, inputs, mode, rng=rng, weights=weights, topk=topk, with_grads=False)
        correct += int((trace.logits.argmax(axis=1) == labels).sum())
    return correct / len(y) if len(y) else math.nan


def _activation_batch(dataset: Dataset, config: TrainConfig) -> np.ndarray:
    start = config.activation_batch_index * config.batch_size
    if start >= len(dataset.train_y):
        logger.warning(f"Activation batch index {config.activation_batch_index} is past the data; using batch 0")
        start = 0
    return dataset.train_x[start:start + config.batch_size]


def measure_epoch(state: TrainState, dataset: Dataset, epoch: int) -> EpochMetrics:
    """
    End-of-epoch metrics: test accuracy, probe objective, entropy estimates
    and Huffman-measured bits.

    The probe objective is always the rcdl objective on the first
    ``probe_batch_size`` test samples, so it is comparable across runs.
    """
    config, model = state.config, state.model
    mode = Mode(config.mode)
    rng = make_rng(config.seed, METRICS_STREAM, epoch)
    metrics = EpochMetrics(epoch=epoch)
    metrics.test_acc = evaluate(model, dataset.test_x, dataset.test_y, mode, rng, topk=config.activation_topk)

    probe_x = dataset.test_x[:config.probe_batch_size]
    probe_y = dataset.test_y[:config.probe_batch_size]
    if mode == Mode.FP:
        metrics.objective = objective_and_gradients(model, probe_x, probe_y, config, mode=Mode.FP,
                                                    with_grads=False).objective
        return metrics

    probe = objective_and_gradients(model, probe_x, probe_y, config, mode=Mode.RCDL, with_grads=False)
    metrics.objective = probe.objective

    activations = {ordinal: record.pre for ordinal, record in probe.trace.activations.items()}
    report = entropy_report(model, activations, topk=config.activation_topk)
    metrics.h_w_bits_per_weight = report.bits_per_weight
    metrics.h_x_bits_per_activation = report.bits_per_activation
    metrics.entropy = report.to_dict()

    if config.measure_huffman:
        bits = avg_bits_metrics(model, _activation_batch(dataset, config), rng, topk=config.activation_topk)
        metrics.huffman_w_bits = bits.bits_per_weight
        metrics.huffman_x_bits = bits.bits_per_activation
        metrics.bit_report = bits.to_dict()
    return metrics


def initial_model(config: TrainConfig, dataset: Dataset) -> Model:
    """
    Fresh model for a run, or the weights of ``config.init_checkpoint``.

    Quantizer parameters of a loaded checkpoint are dropped; the init rules
    set them again from the loaded weights.

    Raises:
        ConfigError: If the checkpoint does not fit the dataset
    """
    if config.init_checkpoint is None:
        return build_model(config.model, dataset.input_shape, dataset.classes, make_rng(config.seed, INIT_STREAM),
                           bits=config.bits, exempt_first_last=config.exempt_first_last)

    model, _ = load_checkpoint(config.init_checkpoint)
    if model.input_shape != dataset.input_shape or model.num_classes != dataset.classes:
        raise ConfigError(f"Checkpoint {config.init_checkpoint} expects {model.input_shape} -> {model.num_classes}, "
                          f"dataset is {dataset.input_shape} -> {dataset.classes}")
    model.bits = config.bits
    weighted = model.weighted_layers()
    for position, layer in enumerate(weighted):
        layer.quant = None
        layer.exempt_8bit = config.exempt_first_last and position in (0, len(weighted) - 1)
    logger.info(f"Initialized from checkpoint {config.init_checkpoint}")
    return model


def run_training(config: TrainConfig, dataset: Dataset, run_dir: Optional[str | Path] = None,
                 observers: Sequence[TrainingObserver] = ()) -> TrainState:
    """
    Full training run: initialize, train for config.epochs, log and checkpoint.

    Args:
        config: Validated run configuration
        dataset: Train/test splits
        run_dir: Where metrics.csv, metrics.json, summary.json and model.ckpt
            go (nothing is written when None)
        observers: Hooks called after every step and epoch

    Returns:
        TrainState: Final state with the metric history

    Raises:
        TrainingAborted: On a non-finite objective (snapshot written to run_dir)
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    model = initial_model(config, dataset)
    mode = Mode(config.mode)
    if mode != Mode.FP:
        init_quant_params(model, dataset.train_x[:config.batch_size], config.bits, config.init_sharpness)

    state = TrainState(
        model=model,
        config=config,
        optimizer=MomentumSGD(config.momentum, config.weight_decay),
        data_rng=make_rng(config.seed, DATA_STREAM),
        quant_rng=make_rng(config.seed, QUANT_STREAM),
        run_dir=run_dir,
    )
    log = MetricsLog(run_dir, config.dump()) if run_dir is not None else None
    if log is not None:
        log.record_histograms(0, weight_histograms(model))

    logger.info(f"Training {config.model} on {dataset.name}: mode={mode.value} b={config.bits} "
                f"lambda={config.lam} gamma={config.gamma} epochs={config.epochs}")

    for epoch in range(1, config.epochs + 1):
        state.epoch = epoch
        scale = lr_scale(epoch - 1, config)
        train_loss, train_objective = train_epoch(state, dataset.train_x, dataset.train_y, scale, observers)

        metrics = measure_epoch(state, dataset, epoch)
        metrics.train_loss = train_loss
        metrics.train_objective = train_objective
        metrics.lr_scale = scale
        state.history.append(metrics)
        if log is not None:
            log.record_histograms(epoch, weight_histograms(model))
            log.append(metrics)
        for observer in observers:
            observer.on_epoch_end(state, metrics)

        logger.info(f"Epoch {epoch}/{config.epochs}: loss={train_loss:.4f} acc={metrics.test_acc:.4f} "
                    f"H_w={metrics.h_w_bits_per_weight:.3f} H_x={metrics.h_x_bits_per_activation:.3f} "
                    f"huff_w={metrics.huffman_w_bits:.3f} objective={metrics.objective:.4f}")

    if run_dir is not None:
        save_checkpoint(model, run_dir / CHECKPOINT_FILE, metadata={"config": config.dump()})
        final = state.history[-1]
        log.write_summary({
            "config": config.dump(),
            "final_test_acc": final.test_acc,
            "final_objective": final.objective,
            "H_w_bits_per_weight": final.h_w_bits_per_weight,
            "H_x_bits_per_activation": final.h_x_bits_per_activation,
            "huffman_w_bits": final.huffman_w_bits,
            "huffman_x_bits": final.huffman_x_bits,
            "steps": state.step,
        })
    return state


@dataclass
class SweepRow:
    lam: float
    gamma: float
    test_acc: float
    bits_per_weight: float
    bits_per_activation: float
    h_w_bits_per_weight: float
    h_x_bits_per_activation: float
    run_dir: Optional[Path] = None
    on_frontier: bool = False


def sweep(configs: Sequence[TrainConfig], dataset: Dataset, runs_dir: Optional[str | Path] = None) -> list[SweepRow]:
    """
    Train one run per config and tabulate accuracy against measured bits.

    Rows on the monotone accuracy-vs-bits-per-weight envelope are flagged.
    When runs_dir is given each run gets its own subdirectory and the table
    is written to sweep.csv.

    Returns:
        list[SweepRow]: One row per config, in input order
    """
    runs_dir = Path(runs_dir) if runs_dir is not None else None
    rows = []
    for config in configs:
        run_dir = runs_dir / run_name(config) if runs_dir else None
        state = run_training(config, dataset, run_dir)
        final = state.history[-1]
        rows.append(SweepRow(
            lam=config.lam,
            gamma=config.gamma,
            test_acc=final.test_acc,
            bits_per_weight=final.huffman_w_bits,
            bits_per_activation=final.huffman_x_bits,
            h_w_bits_per_weight=final.h_w_bits_per_weight,
            h_x_bits_per_activation=final.h_x_bits_per_activation,
            run_dir=run_dir,
        ))

    def frontier_bits(row: SweepRow) -> float:
        return row.h_w_bits_per_weight if math.isnan(row.bits_per_weight) else row.bits_per_weight

    for index in pareto_frontier([(frontier_bits(row), row.test_acc) for row in rows]):
        rows[index].on_frontier = True

    if runs_dir is not None:
        write_table(runs_dir / "sweep.csv",
                    ["lambda", "gamma", "test_acc", "bits_per_weight", "bits_per_activation",
                     "H_w_bits_per_weight", "H_x_bits_per_activation", "on_frontier", "run_dir"],
                    [[row.lam, row.gamma, row.test_acc, row.bits_per_weight, row.bits_per_activation,
                      row.h_w_bits_per_weight, row.h_x_bits_per_activation, int(row.on_frontier),
                      str(row.run_dir)] for row in rows])
    return rows
