"""
Communication-cost simulation for data and pipeline parallel training.

Nothing is sent anywhere: observers hook into a training run and record
the bytes each synchronization or stage boundary would move under a given
payload policy.

Data parallel, W workers, payload P bytes per sync:

- ``parameter_server``: worker 0 hosts the server; each other worker
  uploads P and downloads P, so 2 (W - 1) P in total.
- ``all_reduce``: ring reduce-scatter then all-gather; each phase moves
  (W - 1) P in total across the ring, so again 2 (W - 1) P.

Pipeline, S stages: each cut moves the boundary activations forward and
their gradients backward once per mini-batch.
"""

import csv
import io
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional

import numpy as np

from cdl.codec.huffman import build_codebook
from cdl.config import TrainConfig
from cdl.constants import LEDGER_CSV, LEDGER_JSON, LEDGER_SCHEMA_VERSION
from cdl.datasets import Dataset
from cdl.net.model import Mode, Model, quantize_weights
from cdl.quant import soft_quantize
from cdl.utils import atomic_write_text, make_rng, write_json


logger = logging.getLogger(__name__)

PARSIM_STREAM = 5


class PlanError(Exception):
    """Raised when a parallel plan is invalid or does not fit the run."""
    pass


class ParallelMode(str, Enum):
    DATA = "data_parallel"
    PIPELINE = "pipeline_model_parallel"


class Policy(str, Enum):
    RAW_FP64 = "raw_fp64"
    RAW_FIXED = "raw_fixed_b_bits"
    HUFFMAN = "huffman_coded"


class Topology(str, Enum):
    PARAMETER_SERVER = "parameter_server"
    ALL_REDUCE = "all_reduce"


@dataclass(frozen=True)
class ParallelPlan:
    """
    How a run is split and what its messages carry.

    ``cadence`` counts optimizer steps between data-parallel syncs;
    ``per_epoch`` syncs once at every epoch end instead. ``cuts`` are the
    weighted-layer ordinals whose (post-ReLU) outputs cross a pipeline
    stage boundary. ``bits`` overrides the per-layer bit-width used by the
    fixed-width policy.
    """

    mode: ParallelMode
    workers: int
    policy: Policy = Policy.HUFFMAN
    cadence: int = 1
    per_epoch: bool = False
    topology: Topology = Topology.PARAMETER_SERVER
    cuts: tuple[int, ...] = ()
    bits: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", ParallelMode(self.mode))
        object.__setattr__(self, "policy", Policy(self.policy))
        object.__setattr__(self, "topology", Topology(self.topology))
        if self.mode == ParallelMode.DATA and self.workers < 2:
            raise PlanError(f"Data parallelism needs at least 2 workers, got {self.workers}")
        if self.workers < 1:
            raise PlanError(f"Worker count must be positive, got {self.workers}")
        if self.cadence < 1:
            raise PlanError(f"Sync cadence must be at least 1, got {self.cadence}")
        if self.bits is not None and not 1 <= self.bits <= 64:
            raise PlanError(f"Fixed payload bit-width must lie in [1, 64], got {self.bits}")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data.update(mode=self.mode.value, policy=self.policy.value, topology=self.topology.value,
                    cuts=list(self.cuts))
        return data


@dataclass
class LedgerEvent:
    epoch: int
    step: int
    direction: str
    layer: str
    policy: str
    symbols: int
    payload_bytes: int
    overhead_bytes: int = 0

    @property
    def bytes(self) -> int:
        return self.payload_bytes + self.overhead_bytes


@dataclass
class CommLedger:
    """Single-writer record of simulated transfers."""

    plan: ParallelPlan
    events: list[LedgerEvent] = field(default_factory=list)

    def record(self, event: LedgerEvent) -> None:
        self.events.append(event)

    @property
    def total_bytes(self) -> int:
        return sum(event.bytes for event in self.events)

    def epoch_totals(self) -> dict[int, int]:
        totals: dict[int, int] = defaultdict(int)
        for event in self.events:
            totals[event.epoch] += event.bytes
        return dict(sorted(totals.items()))

    def cumulative_totals(self) -> list[tuple[int, int]]:
        running = 0
        result = []
        for epoch, total in self.epoch_totals().items():
            running += total
            result.append((epoch, running))
        return result

    def write_csv(self, path: str | Path) -> None:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["schema_version", "epoch", "step", "direction", "layer", "policy", "symbols",
                         "payload_bytes", "overhead_bytes", "bytes"])
        for event in self.events:
            writer.writerow([LEDGER_SCHEMA_VERSION, event.epoch, event.step, event.direction, event.layer,
                             event.policy, event.symbols, event.payload_bytes, event.overhead_bytes, event.bytes])
        atomic_write_text(path, buffer.getvalue())

    def summary(self) -> dict[str, Any]:
        return {
            "schema_version": LEDGER_SCHEMA_VERSION,
            "plan": self.plan.to_dict(),
            "events": len(self.events),
            "total_bytes": self.total_bytes,
            "per_epoch": {str(epoch): total for epoch, total in self.epoch_totals().items()},
            "cumulative": [[epoch, total] for epoch, total in self.cumulative_totals()],
        }

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        self.write_csv(out_dir / LEDGER_CSV)
        write_json(out_dir / LEDGER_JSON, self.summary())


def payload_size(symbols: np.ndarray, policy: Policy, bits: int) -> tuple[int, int]:
    """
    Bytes needed to ship a tensor of quantization symbols.

    Args:
        symbols: Grid indices (only their count matters for the raw policies)
        policy: Payload policy
        bits: Bit-width of the fixed-width policy

    Returns:
        tuple: (payload bytes, codebook overhead bytes)
    """
    count = int(symbols.size)
    if count == 0:
        return 0, 0
    if policy == Policy.RAW_FP64:
        return 8 * count, 0
    if policy == Policy.RAW_FIXED:
        return math.ceil(count * bits / 8), 0
    codebook = build_codebook(symbols)
    # u16 entry count plus (i32 symbol, u8 length) per entry
    overhead = math.ceil((16 + 40 * len(codebook.lengths)) / 8)
    return math.ceil(codebook.payload_bits() / 8), overhead


class DataParallelSimulator:
    """
    Observer that accounts weight synchronizations.

    Under the coded policy the sync is lossy: the master weights are
    replaced by the transmitted Q_p values, so training continues from
    exactly what every worker received. The raw policies leave training
    untouched.
    """

    def __init__(self, plan: ParallelPlan, rng: np.random.Generator):
        if plan.mode != ParallelMode.DATA:
            raise PlanError(f"Plan mode {plan.mode.value} is not data_parallel")
        self.plan = plan
        self.rng = rng
        self.ledger = CommLedger(plan)

    def on_step(self, state, info) -> None:
        if not self.plan.per_epoch and state.step % self.plan.cadence == 0:
            self.sync(state.model, state.epoch, state.step)

    def on_epoch_end(self, state, metrics) -> None:
        if self.plan.per_epoch:
            self.sync(state.model, state.epoch, state.step)

    def _messages(self, payload: int, overhead: int) -> list[tuple[str, int, int]]:
        peers = self.plan.workers - 1
        if self.plan.topology == Topology.PARAMETER_SERVER:
            return [(direction, payload, overhead) for _ in range(peers) for direction in ("upload", "download")]
        return [("reduce_scatter", peers * payload, peers * overhead),
                ("all_gather", peers * payload, peers * overhead)]

    def sync(self, model: Model, epoch: int, step: int) -> None:
        policy = self.plan.policy
        if policy == Policy.HUFFMAN and not model.has_quant_params():
            raise PlanError(f"Policy {policy.value} needs a quantized run")
        quantized = (quantize_weights(model, Mode.CDL, self.rng, with_grads=False)
                     if policy == Policy.HUFFMAN else None)

        for ordinal, layer in enumerate(model.weighted_layers()):
            symbols = quantized[ordinal].indices if quantized is not None else layer.weight
            bits = self.plan.bits or (layer.quant.bits if layer.quant is not None else model.bits)
            payload, overhead = payload_size(symbols, policy, bits)
            for direction, payload_bytes, overhead_bytes in self._messages(payload, overhead):
                self.ledger.record(LedgerEvent(epoch, step, direction, layer.name, policy.value,
                                               int(symbols.size), payload_bytes, overhead_bytes))
            if quantized is not None:
                layer.weight = quantized[ordinal].values


class PipelineSimulator:
    """
    Observer that accounts stage-boundary traffic of every mini-batch.

    Forward messages carry the quantized boundary activations under the
    plan's policy. Backward messages carry their gradients at the fixed
    bit-width (fp64 under the raw_fp64 policy). Activation symbols are the
    run's own Q_p draws in cdl mode and fresh draws from this simulator's
    stream otherwise, so the run itself is never perturbed.
    """

    def __init__(self, plan: ParallelPlan, model: Model, rng: np.random.Generator, topk: Optional[int] = None):
        if plan.mode != ParallelMode.PIPELINE:
            raise PlanError(f"Plan mode {plan.mode.value} is not pipeline_model_parallel")
        self.plan = plan
        self.rng = rng
        self.topk = topk
        self.ledger = CommLedger(plan)
        self.cuts = self._resolve_cuts(plan, model)

    @staticmethod
    def _resolve_cuts(plan: ParallelPlan, model: Model) -> tuple[int, ...]:
        available = sorted(model.activation_points.values())
        wanted = plan.workers - 1
        cuts = tuple(plan.cuts) if plan.cuts else tuple(available[:wanted])
        if len(cuts) != wanted:
            raise PlanError(f"{plan.workers} stages need {wanted} cuts; the model offers {len(available)}")
        for cut in cuts:
            if cut not in available:
                raise PlanError(f"Stage cut after weighted layer {cut} is not a layer boundary "
                                f"with activations (valid: {available})")
        if list(cuts) != sorted(set(cuts)):
            raise PlanError(f"Stage cuts must be strictly increasing, got {cuts}")
        return cuts

    def on_step(self, state, info) -> None:
        model = state.model
        policy = self.plan.policy
        trace = info.result.trace
        weighted = model.weighted_layers()
        for cut in self.cuts:
            record = trace.activations[cut]
            quant = weighted[cut].quant
            bits = self.plan.bits or (quant.bits if quant is not None else model.bits)

            if record.indices is not None:
                symbols = record.indices
            elif policy == Policy.HUFFMAN:
                if quant is None:
                    raise PlanError("Policy huffman_coded needs a quantized run")
                symbols = soft_quantize(record.pre, quant.activation_grid, quant.beta, topk=self.topk,
                                        rng=self.rng, with_grads=False).indices
            else:
                symbols = record.pre

            payload, overhead = payload_size(symbols, policy, bits)
            self.ledger.record(LedgerEvent(state.epoch, state.step, "forward", weighted[cut].name,
                                           policy.value, int(symbols.size), payload, overhead))
            gradient_policy = Policy.RAW_FP64 if policy == Policy.RAW_FP64 else Policy.RAW_FIXED
            gradient_bytes, _ = payload_size(symbols, gradient_policy, bits)
            self.ledger.record(LedgerEvent(state.epoch, state.step, "backward", weighted[cut].name,
                                           gradient_policy.value, int(symbols.size), gradient_bytes))

    def on_epoch_end(self, state, metrics) -> None:
        pass


def simulate_data_parallel(plan: ParallelPlan, config: TrainConfig, dataset: Dataset,
                           run_dir: Optional[str | Path] = None):
    """
    Train with a data-parallel sync observer attached.

    Returns:
        tuple: (CommLedger, TrainState)

    Raises:
        PlanError: If the plan is not data_parallel
    """
    from cdl.train import run_training

    if plan.mode != ParallelMode.DATA:
        raise PlanError(f"Plan mode {plan.mode.value} is not data_parallel")
    simulator = DataParallelSimulator(plan, make_rng(config.seed, PARSIM_STREAM))
    state = run_training(config, dataset, run_dir, observers=[simulator])
    if run_dir is not None:
        simulator.ledger.write(run_dir)
    logger.info(f"Data-parallel simulation: {simulator.ledger.total_bytes} bytes over "
                f"{len(simulator.ledger.events)} messages")
    return simulator.ledger, state


def simulate_pipeline(plan: ParallelPlan, config: TrainConfig, dataset: Dataset,
                      run_dir: Optional[str | Path] = None):
    """
    Train with a pipeline boundary observer attached.

    Returns:
        tuple: (CommLedger, TrainState)

    Raises:
        PlanError: If the plan is not pipeline_model_parallel or a cut is invalid
    """
    from cdl.train import initial_model, run_training

    if plan.mode != ParallelMode.PIPELINE:
        raise PlanError(f"Plan mode {plan.mode.value} is not pipeline_model_parallel")
    if plan.workers == 1:
        logger.info("Single pipeline stage: no boundary traffic")
        state = run_training(config, dataset, run_dir)
        ledger = CommLedger(plan)
        if run_dir is not None:
            ledger.write(run_dir)
        return ledger, state

    simulator = PipelineSimulator(plan, initial_model(config, dataset), make_rng(config.seed, PARSIM_STREAM),
                                  topk=config.activation_topk)
    state = run_training(config, dataset, run_dir, observers=[simulator])
    if run_dir is not None:
        simulator.ledger.write(run_dir)
    logger.info(f"Pipeline simulation: {simulator.ledger.total_bytes} bytes over "
                f"{len(simulator.ledger.events)} messages")
    return simulator.ledger, state
