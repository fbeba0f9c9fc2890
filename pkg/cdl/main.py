"""Command-line entry point: training, sweeps, compression, verification and simulations."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from cdl.codec.container import CorruptFileError, compress_model, verify_compressed, write_compressed
from cdl.config import ConfigError, TrainConfig, build_config, load_config_file, settings
from cdl.constants import DEFAULT_SWEEP_PAIRS
from cdl.datasets import DatasetError, load_dataset
from cdl.gradcheck import SUITES, run_gradcheck
from cdl.metrics import MetricsError, export_metrics
from cdl.net.checkpoint import CheckpointError, load_checkpoint
from cdl.net.model import Mode
from cdl.parsim import ParallelPlan, PlanError, simulate_data_parallel, simulate_pipeline
from cdl.train import METRICS_STREAM, QUANT_STREAM, TrainingAborted, evaluate, run_name, run_training, sweep
from cdl.utils import make_rng


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# Flags that map one-to-one onto TrainConfig fields: (flag, field, argparse kwargs)
TRAIN_FLAGS: list[tuple[str, str, dict[str, Any]]] = [
    ("--lambda", "lam", {"type": float, "help": "Weight entropy penalty"}),
    ("--gamma", "gamma", {"type": float, "help": "Activation entropy penalty"}),
    ("--penalty-normalization", "penalty_normalization", {"choices": ["mean", "total"]}),
    ("--mode", "mode", {"choices": [mode.value for mode in Mode]}),
    ("--bits", "bits", {"type": int, "help": "Quantizer bit-width of non-exempt layers"}),
    ("--exempt-first-last", "exempt_first_last", {"action": argparse.BooleanOptionalAction}),
    ("--activation-topk", "activation_topk", {"type": int}),
    ("--init-sharpness", "init_sharpness", {"type": float}),
    ("--epochs", "epochs", {"type": int}),
    ("--batch-size", "batch_size", {"type": int}),
    ("--lr-w", "lr_w", {"type": float}),
    ("--lr-q", "lr_q", {"type": float}),
    ("--lr-s", "lr_s", {"type": float}),
    ("--lr-alpha", "lr_alpha", {"type": float}),
    ("--lr-beta", "lr_beta", {"type": float}),
    ("--momentum", "momentum", {"type": float}),
    ("--weight-decay", "weight_decay", {"type": float}),
    ("--lr-milestones", "lr_milestones", {"type": float, "nargs": "*"}),
    ("--lr-decay", "lr_decay", {"type": float}),
    ("--seed", "seed", {"type": int}),
    ("--model", "model", {"choices": ["mlp", "cnn", "tiny"]}),
    ("--dataset", "dataset", {"choices": ["mnist", "synthetic"]}),
    ("--train-subset", "train_subset", {"type": int}),
    ("--test-subset", "test_subset", {"type": int}),
    ("--synthetic-classes", "synthetic_classes", {"type": int}),
    ("--synthetic-train", "synthetic_train", {"type": int}),
    ("--synthetic-test", "synthetic_test", {"type": int}),
    ("--synthetic-image-size", "synthetic_image_size", {"type": int}),
    ("--init-checkpoint", "init_checkpoint", {}),
    ("--measure-huffman", "measure_huffman", {"action": argparse.BooleanOptionalAction}),
    ("--activation-batch-index", "activation_batch_index", {"type": int}),
    ("--probe-batch-size", "probe_batch_size", {"type": int}),
]


class UsageError(Exception):
    """Raised for invalid flag combinations argparse cannot catch."""
    pass


def setup_logging() -> None:
    """Configure the root logger once for the process."""
    level = getattr(logging, settings.log_level.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )
    logging.getLogger().setLevel(level)
    # httpx logs every request at INFO
    logging.getLogger("httpx").setLevel(logging.WARNING)


def log_banner(title: str, config: Optional[TrainConfig] = None) -> None:
    logger.info("=" * 60)
    logger.info(title)
    logger.info("=" * 60)
    logger.info(f"Data Directory: {settings.data_dir}")
    logger.info(f"Runs Directory: {settings.runs_dir}")
    logger.info(f"SSL Verification: {settings.verify_ssl}")
    logger.info(f"HTTP Proxy: {'Configured' if settings.proxy_url else 'Not configured'}")
    if config is not None:
        logger.info(f"Model: {config.model} on {config.dataset}, mode {config.mode}, b={config.bits}")
        logger.info(f"Penalties: lambda={config.lam} gamma={config.gamma} ({config.penalty_normalization})")
        logger.info(f"Epochs: {config.epochs}, batch {config.batch_size}, seed {config.seed}")
    logger.info("=" * 60)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="TOML or JSON run config; flags override its values")
    group = parser.add_argument_group("run configuration")
    for flag, dest, kwargs in TRAIN_FLAGS:
        group.add_argument(flag, dest=dest, default=None, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdl", description="Coded deep learning: train, compress and measure "
                                                             "quantized networks with entropy-coded weights.")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="Train one model")
    _add_train_flags(train)
    train.add_argument("--run-dir", type=Path, help="Output directory (default: <runs_dir>/<run name>)")

    sweep_parser = commands.add_parser("sweep", help="Train over several (lambda, gamma) pairs")
    _add_train_flags(sweep_parser)
    sweep_parser.add_argument("--pairs", help="Comma-separated lambda:gamma pairs (default: 0:0 .. 0.09:0.09)")
    sweep_parser.add_argument("--runs-dir", type=Path, help="Parent directory of the per-pair runs")

    eval_parser = commands.add_parser("eval", help="Evaluate a checkpoint on the test split")
    eval_parser.add_argument("checkpoint", type=Path)
    _add_train_flags(eval_parser)

    compress = commands.add_parser("compress", help="Huffman-code a checkpoint's quantized weights and activations")
    compress.add_argument("checkpoint", type=Path)
    compress.add_argument("--out", type=Path, help="Output file (default: checkpoint path with .cdlz)")
    compress.add_argument("--weights-only", action="store_true",
                          help="Skip the activation streams (no dataset needed)")
    _add_train_flags(compress)

    verify = commands.add_parser("verify", help="Decode, re-encode and check a compressed file")
    verify.add_argument("file", type=Path)

    gradcheck = commands.add_parser("gradcheck", help="Finite-difference checks of the analytic derivatives")
    gradcheck.add_argument("--suites", default=",".join(SUITES), help=f"Comma-separated subset of {', '.join(SUITES)}")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--cases", type=int, help="Instances per suite (overrides every suite's default)")
    gradcheck.add_argument("--corrupt", type=float, nargs="?", const=0.01, default=0.0, help=argparse.SUPPRESS)

    parsim = commands.add_parser("parsim", help="Train while accounting simulated communication")
    _add_train_flags(parsim)
    parsim.add_argument("--parallel", default="data_parallel", choices=["data_parallel", "pipeline_model_parallel"])
    parsim.add_argument("--workers", type=int, default=2, help="Workers (data parallel) or stages (pipeline)")
    parsim.add_argument("--policy", default="huffman_coded", choices=["raw_fp64", "raw_fixed_b_bits", "huffman_coded"])
    parsim.add_argument("--cadence", default="1", help="Optimizer steps between syncs, or 'epoch'")
    parsim.add_argument("--topology", default="parameter_server", choices=["parameter_server", "all_reduce"])
    parsim.add_argument("--cuts", type=int, nargs="*", default=[], help="Weighted-layer ordinals at stage cuts")
    parsim.add_argument("--payload-bits", type=int, help="Bit-width of the raw_fixed_b_bits policy")
    parsim.add_argument("--run-dir", type=Path)

    export = commands.add_parser("export-metrics", help="Write plot-ready tables from run directories")
    export.add_argument("run_dirs", type=Path, nargs="+")
    export.add_argument("--out", type=Path, required=True)
    return parser


def config_from_args(args: argparse.Namespace, base: Optional[dict[str, Any]] = None) -> TrainConfig:
    """
    Merge ``base`` values, the --config file and explicit flags (in rising precedence).

    Raises:
        ConfigError: If the file is unreadable or the result fails validation
    """
    values = dict(base or {})
    if getattr(args, "config", None) is not None:
        values.update(load_config_file(args.config))
    overrides = {dest: getattr(args, dest, None) for _, dest, _ in TRAIN_FLAGS}
    return build_config(values, **overrides)


def parse_pairs(text: Optional[str]) -> list[tuple[float, float]]:
    if not text:
        return list(DEFAULT_SWEEP_PAIRS)
    pairs = []
    for item in text.split(","):
        try:
            lam, gamma = item.split(":")
            pairs.append((float(lam), float(gamma)))
        except ValueError as e:
            raise UsageError(f"Invalid lambda:gamma pair {item!r}") from e
    return pairs


def cmd_train(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    log_banner("Coded Deep Learning - Training", config)
    run_dir = args.run_dir or Path(settings.runs_dir) / run_name(config)
    state = run_training(config, load_dataset(config), run_dir)
    final = state.history[-1]
    print(f"test_acc={final.test_acc:.4f} huffman_w_bits={final.huffman_w_bits:.4f} "
          f"huffman_x_bits={final.huffman_x_bits:.4f} run_dir={run_dir}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    base = config_from_args(args)
    pairs = parse_pairs(args.pairs)
    values = base.model_dump(by_alias=True)
    configs = [build_config(values | {"lambda": lam, "gamma": gamma}) for lam, gamma in pairs]
    log_banner(f"Coded Deep Learning - Sweep over {len(configs)} pairs", base)
    runs_dir = args.runs_dir or Path(settings.runs_dir) / f"sweep_{base.mode}_b{base.bits}_seed{base.seed}"
    for row in sweep(configs, load_dataset(base), runs_dir):
        marker = "*" if row.on_frontier else " "
        print(f"{marker} lambda={row.lam:g} gamma={row.gamma:g} test_acc={row.test_acc:.4f} "
              f"bits_per_weight={row.bits_per_weight:.4f} bits_per_activation={row.bits_per_activation:.4f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model, metadata = load_checkpoint(args.checkpoint)
    stored = {key: value for key, value in metadata.get("config", {}).items() if key != "schema_version"}
    config = config_from_args(args, stored)
    dataset = load_dataset(config)
    mode = Mode(config.mode)
    if mode != Mode.FP and not model.has_quant_params():
        raise UsageError(f"Checkpoint {args.checkpoint} has no quantizer state; evaluate it with --mode fp")
    accuracy = evaluate(model, dataset.test_x, dataset.test_y, mode, make_rng(config.seed, METRICS_STREAM),
                        topk=config.activation_topk)
    print(f"test_acc={accuracy:.4f} mode={mode.value} samples={len(dataset.test_y)}")
    return EXIT_OK


def _print_bits(report) -> None:
    print(f"bits_per_weight={report.bits_per_weight:.6f} "
          f"bits_per_weight_with_overhead={report.bits_per_weight_with_overhead:.6f}")
    if report.activations:
        print(f"bits_per_activation={report.bits_per_activation:.6f} "
              f"bits_per_activation_with_overhead={report.bits_per_activation_with_overhead:.6f}")
    else:
        print("bits_per_activation=n/a (no activation streams)")
    for kind, layers in (("weights", report.weights), ("activations", report.activations)):
        for layer in layers:
            print(f"  {layer.name}: {layer.count} {kind}, {layer.payload_bits} payload bits, "
                  f"{layer.codebook_bits} codebook bits")


def measurement_batch(config: TrainConfig) -> np.ndarray:
    """One seeded mini-batch of test inputs for the activation streams."""
    dataset = load_dataset(config)
    rng = make_rng(config.seed, METRICS_STREAM)
    size = min(config.batch_size, len(dataset.test_y))
    return dataset.test_x[np.sort(rng.choice(len(dataset.test_y), size=size, replace=False))]


def cmd_compress(args: argparse.Namespace) -> int:
    model, metadata = load_checkpoint(args.checkpoint)
    if not model.has_quant_params():
        raise UsageError(f"Checkpoint {args.checkpoint} has no quantizer state to compress with")
    stored = {key: value for key, value in metadata.get("config", {}).items() if key != "schema_version"}
    config = config_from_args(args, stored)
    batch = None if args.weights_only else measurement_batch(config)
    out = args.out or args.checkpoint.with_suffix(".cdlz")
    compressed = compress_model(model, make_rng(config.seed, QUANT_STREAM), batch, topk=config.activation_topk)
    data = write_compressed(compressed, out)
    print(f"wrote {out} ({len(data)} bytes)")
    _print_bits(compressed.bit_report())
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    report = verify_compressed(args.file)
    print(f"{args.file}: OK")
    _print_bits(report)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    suites = [name.strip() for name in args.suites.split(",") if name.strip()]
    unknown = [name for name in suites if name not in SUITES]
    if unknown or not suites:
        raise UsageError(f"Unknown suite(s) {unknown}; choose from {', '.join(SUITES)}")
    cases = {name: args.cases for name in suites} if args.cases else None
    results = run_gradcheck(suites, seed=args.seed, cases=cases, corrupt=args.corrupt)
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{result.name:8s} {status} max_error={result.max_error:.3e} tolerance={result.tolerance:g} "
              f"cases={result.cases}")
    return EXIT_OK if all(result.passed for result in results) else EXIT_FAILURE


def cmd_parsim(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    per_epoch = args.cadence == "epoch"
    try:
        cadence = 1 if per_epoch else int(args.cadence)
    except ValueError as e:
        raise UsageError(f"--cadence must be a step count or 'epoch', got {args.cadence!r}") from e
    plan = ParallelPlan(mode=args.parallel, workers=args.workers, policy=args.policy, cadence=cadence,
                        per_epoch=per_epoch, topology=args.topology, cuts=tuple(args.cuts), bits=args.payload_bits)
    log_banner(f"Coded Deep Learning - {plan.mode.value} simulation, {plan.workers} workers", config)
    run_dir = args.run_dir or Path(settings.runs_dir) / f"parsim_{plan.mode.value}_{plan.policy.value}_{run_name(config)}"
    simulate = simulate_data_parallel if plan.mode.value == "data_parallel" else simulate_pipeline
    ledger, _ = simulate(plan, config, load_dataset(config), run_dir)
    for epoch, total in ledger.epoch_totals().items():
        print(f"epoch {epoch}: {total} bytes")
    print(f"total: {ledger.total_bytes} bytes ({len(ledger.events)} messages) run_dir={run_dir}")
    return EXIT_OK


def cmd_export_metrics(args: argparse.Namespace) -> int:
    paths = export_metrics(args.run_dirs, args.out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "compress": cmd_compress,
    "verify": cmd_verify,
    "gradcheck": cmd_gradcheck,
    "parsim": cmd_parsim,
    "export-metrics": cmd_export_metrics,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command.

    Returns:
        int: 0 on success, 1 on runtime failure, 2 on usage or config errors
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging()

    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, PlanError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CorruptFileError as e:
        logger.error(f"Corrupt file at byte offset {e.offset}: {e}")
        print(f"error: corrupt file at byte offset {e.offset}: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except TrainingAborted as e:
        print(f"error: {e} (snapshot: {e.snapshot_path})", file=sys.stderr)
        return EXIT_FAILURE
    except (DatasetError, CheckpointError, MetricsError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
