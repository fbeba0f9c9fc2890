"""Per-epoch metric logs of a training run and plot-ready exports."""

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from cdl.constants import METRICS_CSV, METRICS_JSON, METRICS_SCHEMA_VERSION, SUMMARY_JSON
from cdl.utils import atomic_write_text, write_json


logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "schema_version",
    "epoch",
    "train_loss",
    "test_acc",
    "H_w_bits_per_weight",
    "H_x_bits_per_activation",
    "huffman_w_bits",
    "huffman_x_bits",
    "objective",
]


class MetricsError(Exception):
    """Raised when metric files are missing or unreadable."""
    pass


class SchemaError(MetricsError):
    """Raised when a metric file carries an unsupported schema version."""
    pass


@dataclass
class EpochMetrics:
    """Everything measured at the end of one epoch (epoch 0 is the initial state)."""

    epoch: int
    train_loss: float = math.nan
    test_acc: float = math.nan
    h_w_bits_per_weight: float = math.nan
    h_x_bits_per_activation: float = math.nan
    huffman_w_bits: float = math.nan
    huffman_x_bits: float = math.nan
    objective: float = math.nan
    train_objective: float = math.nan
    lr_scale: float = 1.0
    entropy: Optional[dict[str, Any]] = None
    bit_report: Optional[dict[str, Any]] = None

    def csv_row(self) -> list[Any]:
        return [
            METRICS_SCHEMA_VERSION,
            self.epoch,
            self.train_loss,
            self.test_acc,
            self.h_w_bits_per_weight,
            self.h_x_bits_per_activation,
            self.huffman_w_bits,
            self.huffman_x_bits,
            self.objective,
        ]


def check_schema(version: Any, source: str) -> None:
    """Reject files whose schema major differs from ours."""
    if version is None or str(version).split(".")[0] != METRICS_SCHEMA_VERSION.split(".")[0]:
        raise SchemaError(f"{source}: unsupported schema version {version!r}")


def weight_histograms(model, bins: Optional[int] = None) -> dict[str, dict[str, list]]:
    """
    Histogram of every weighted layer's master weights.

    Quantized layers use 2^b bins centred on their grid levels (values
    outside the grid span land in the end bins); layers without quantizer
    state use 2^bits bins over their own range.
    """
    histograms = {}
    for layer in model.weighted_layers():
        weights = layer.weight.ravel()
        if layer.quant is not None:
            grid = layer.quant.weight_grid
            edges = np.append(grid.levels - grid.step / 2.0, grid.levels[-1] + grid.step / 2.0)
            weights = np.clip(weights, edges[0], edges[-1])
        else:
            count = bins or (1 << model.bits)
            low, high = float(weights.min()), float(weights.max())
            edges = np.linspace(low, high if high > low else low + 1.0, count + 1)
        counts, edges = np.histogram(weights, bins=edges)
        histograms[layer.name] = {"edges": edges.tolist(), "counts": counts.tolist()}
    return histograms


class MetricsLog:
    """
    Writer for metrics.csv and metrics.json inside a run directory.

    Both files are rewritten atomically after every epoch, so a crash never
    leaves a half-written row.
    """

    def __init__(self, run_dir: str | Path, config: dict[str, Any]):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.rows: list[EpochMetrics] = []
        self.document: dict[str, Any] = {
            "schema_version": METRICS_SCHEMA_VERSION,
            "config": config,
            "epochs": [],
            "histograms": {},
        }

    def record_histograms(self, epoch: int, histograms: dict[str, Any]) -> None:
        self.document["histograms"][str(epoch)] = histograms

    def append(self, metrics: EpochMetrics) -> None:
        self.rows.append(metrics)
        self.document["epochs"].append(asdict(metrics))
        self.flush()

    def flush(self) -> None:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow(row.csv_row())
        atomic_write_text(self.run_dir / METRICS_CSV, buffer.getvalue())
        write_json(self.run_dir / METRICS_JSON, self.document)

    def write_summary(self, summary: dict[str, Any]) -> None:
        write_json(self.run_dir / SUMMARY_JSON, {"schema_version": METRICS_SCHEMA_VERSION, **summary})


def _expected_files(run_dir: Path) -> list[Path]:
    return [run_dir / METRICS_CSV, run_dir / METRICS_JSON]


def read_metrics_csv(path: str | Path) -> list[dict[str, float]]:
    """
    Read metrics.csv back into dictionaries of floats.

    Raises:
        MetricsError: If the file is missing
        SchemaError: If a row carries another schema major
    """
    path = Path(path)
    if not path.exists():
        raise MetricsError(f"Metrics file not found: {path}")
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        for record in csv.DictReader(fh):
            check_schema(record.get("schema_version"), str(path))
            rows.append({key: float(value) for key, value in record.items() if key != "schema_version"})
    return rows


def read_metrics_json(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise MetricsError(f"Metrics file not found: {path}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MetricsError(f"Failed to parse {path}: {e}") from e
    check_schema(document.get("schema_version"), str(path))
    return document


def pareto_frontier(points: Sequence[tuple[float, float]]) -> list[int]:
    """
    Indices of the monotone accuracy-vs-bits envelope.

    Points are (bits, accuracy). Walking in increasing bits, a point is kept
    when it is strictly more accurate than every point kept before it, so
    accuracy along the frontier never drops as bits grow.
    """
    usable = [i for i, (bits, accuracy) in enumerate(points) if not (math.isnan(bits) or math.isnan(accuracy))]
    order = sorted(usable, key=lambda i: (points[i][0], -points[i][1]))
    frontier = []
    best = -math.inf
    for index in order:
        accuracy = points[index][1]
        if accuracy > best:
            frontier.append(index)
            best = accuracy
    return frontier


@dataclass
class RunMetrics:
    name: str
    config: dict[str, Any]
    rows: list[dict[str, float]]
    histograms: dict[str, Any] = field(default_factory=dict)

    @property
    def final(self) -> dict[str, float]:
        return self.rows[-1]


def load_run(run_dir: str | Path) -> RunMetrics:
    """
    Load both metric files of a run directory.

    Raises:
        MetricsError: Listing the expected files when any is missing
    """
    run_dir = Path(run_dir)
    missing = [path.name for path in _expected_files(run_dir) if not path.exists()]
    if missing:
        expected = ", ".join(path.name for path in _expected_files(run_dir))
        raise MetricsError(f"Run directory {run_dir} lacks {', '.join(missing)} (expected: {expected})")
    rows = read_metrics_csv(run_dir / METRICS_CSV)
    if not rows:
        raise MetricsError(f"{run_dir / METRICS_CSV} has no epochs")
    document = read_metrics_json(run_dir / METRICS_JSON)
    return RunMetrics(name=run_dir.name, config=document.get("config", {}), rows=rows,
                      histograms=document.get("histograms", {}))


def write_table(path: Path, header: list[str], rows: list[list[Any]]) -> None:
    """Write a CSV table with a leading schema_version column."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["schema_version", *header])
    for row in rows:
        writer.writerow([METRICS_SCHEMA_VERSION, *row])
    atomic_write_text(path, buffer.getvalue())


def _bits_of(row: dict[str, float]) -> float:
    bits = row.get("huffman_w_bits", math.nan)
    return row.get("H_w_bits_per_weight", math.nan) if math.isnan(bits) else bits


def export_metrics(run_dirs: Sequence[str | Path], out_dir: str | Path) -> dict[str, Path]:
    """
    Write plot-ready tables for one or more runs.

    Files: frontier.csv (final accuracy vs bits with a frontier flag),
    bits_vs_epoch.csv, objective_vs_epoch.csv, histograms.csv (one row per
    layer bin per epoch) and export.json with the same content.

    Returns:
        dict: Table name -> written path
    """
    runs = [load_run(run_dir) for run_dir in run_dirs]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    points = [(_bits_of(run.final), run.final["test_acc"]) for run in runs]
    on_frontier = set(pareto_frontier(points))
    frontier_rows = [
        [run.name, run.config.get("lambda"), run.config.get("gamma"), run.final["test_acc"],
         run.final["huffman_w_bits"], run.final["huffman_x_bits"], run.final["H_w_bits_per_weight"],
         run.final["H_x_bits_per_activation"], int(index in on_frontier)]
        for index, run in enumerate(runs)
    ]

    bits_rows, objective_rows, histogram_rows = [], [], []
    for run in runs:
        for row in run.rows:
            epoch = int(row["epoch"])
            bits_rows.append([run.name, epoch, row["H_w_bits_per_weight"], row["H_x_bits_per_activation"],
                              row["huffman_w_bits"], row["huffman_x_bits"]])
            objective_rows.append([run.name, epoch, row["objective"], row["train_loss"]])
        for epoch, layers in sorted(run.histograms.items(), key=lambda item: int(item[0])):
            for layer, histogram in layers.items():
                edges = histogram["edges"]
                for position, count in enumerate(histogram["counts"]):
                    histogram_rows.append([run.name, int(epoch), layer, position,
                                           edges[position], edges[position + 1], count])

    paths = {
        "frontier": out_dir / "frontier.csv",
        "bits_vs_epoch": out_dir / "bits_vs_epoch.csv",
        "objective_vs_epoch": out_dir / "objective_vs_epoch.csv",
        "histograms": out_dir / "histograms.csv",
        "json": out_dir / "export.json",
    }
    write_table(paths["frontier"], ["run", "lambda", "gamma", "test_acc", "huffman_w_bits", "huffman_x_bits",
                                   "H_w_bits_per_weight", "H_x_bits_per_activation", "on_frontier"], frontier_rows)
    write_table(paths["bits_vs_epoch"], ["run", "epoch", "H_w_bits_per_weight", "H_x_bits_per_activation",
                                        "huffman_w_bits", "huffman_x_bits"], bits_rows)
    write_table(paths["objective_vs_epoch"], ["run", "epoch", "objective", "train_loss"], objective_rows)
    write_table(paths["histograms"], ["run", "epoch", "layer", "bin", "left_edge", "right_edge", "count"],
               histogram_rows)
    write_json(paths["json"], {
        "schema_version": METRICS_SCHEMA_VERSION,
        "frontier": frontier_rows,
        "bits_vs_epoch": bits_rows,
        "objective_vs_epoch": objective_rows,
        "histograms": histogram_rows,
    })
    logger.info(f"Exported metrics of {len(runs)} run(s) to {out_dir}")
    return paths
