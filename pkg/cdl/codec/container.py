"""
Compressed model files and the average-bits metrics.

File layout (little-endian)::

    magic "CDLZ" | u16 major | u16 minor | u8 bits | u16 layer count
    per weighted layer (a "record"):
        blob name
        u8 signed | u8 bits | f64 step
        u8 ndim | u32 dim * ndim                  weight shape
        u32 bias count | f64 bias * count         raw, not entropy coded
        u16 codebook entries | (i32 symbol, u8 length) * entries   canonical order
        u64 symbol count | u64 payload bits | blob payload
        u32 CRC-32 of the record bytes above
    since 1.1: u16 activation stream count
    per activation stream (also a record):
        blob name
        u16 codebook entries | (i32 symbol, u8 length) * entries
        u64 symbol count | u64 payload bits | blob payload
        u32 CRC-32 of the record bytes above
    32-byte SHA-256 of every preceding byte

Symbols are grid indices, so the decoded weights are ``symbol * step``
exactly. Activation streams hold the indices of one cdl-mode inference
over a measurement batch; they only feed the bits-per-activation metrics.
"""

import hashlib
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from cdl.codec.bitstream import ByteReader, ByteWriter, StreamError
from cdl.codec.huffman import Codebook, CodecError, Payload, build_codebook, decode_layer, encode_layer
from cdl.constants import COMPRESSED_MAGIC, COMPRESSED_VERSION, METRICS_SCHEMA_VERSION
from cdl.net.model import Mode, Model, forward, quantize_weights
from cdl.quant import QuantGrid, QuantizationError
from cdl.utils import atomic_write_bytes


logger = logging.getLogger(__name__)

_DIGEST_SIZE = 32


class CorruptFileError(Exception):
    """Raised when a compressed file fails to parse or verify."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


@dataclass
class LayerBits:
    """Measured Huffman cost of one layer's symbol stream."""

    name: str
    count: int
    payload_bits: int
    codebook_entries: int

    @property
    def codebook_bits(self) -> int:
        # u16 entry count plus (i32 symbol, u8 length) per entry
        return 16 + 40 * self.codebook_entries

    @property
    def bits_per_symbol(self) -> float:
        return self.payload_bits / self.count if self.count else 0.0


@dataclass
class BitReport:
    """Average bits per weight and per activation, payload only and with codebooks."""

    weights: list[LayerBits] = field(default_factory=list)
    activations: list[LayerBits] = field(default_factory=list)

    @staticmethod
    def _average(layers: list[LayerBits], overhead: bool) -> float:
        count = sum(layer.count for layer in layers)
        if not count:
            return float("nan")
        bits = sum(layer.payload_bits + (layer.codebook_bits if overhead else 0) for layer in layers)
        return bits / count

    @property
    def bits_per_weight(self) -> float:
        return self._average(self.weights, overhead=False)

    @property
    def bits_per_activation(self) -> float:
        return self._average(self.activations, overhead=False)

    @property
    def bits_per_weight_with_overhead(self) -> float:
        return self._average(self.weights, overhead=True)

    @property
    def bits_per_activation_with_overhead(self) -> float:
        return self._average(self.activations, overhead=True)

    def to_dict(self) -> dict[str, Any]:
        def rows(layers):
            return [{"name": layer.name, "count": layer.count, "payload_bits": layer.payload_bits,
                     "codebook_bits": layer.codebook_bits} for layer in layers]

        return {
            "schema_version": METRICS_SCHEMA_VERSION,
            "bits_per_weight": self.bits_per_weight,
            "bits_per_activation": self.bits_per_activation,
            "bits_per_weight_with_overhead": self.bits_per_weight_with_overhead,
            "bits_per_activation_with_overhead": self.bits_per_activation_with_overhead,
            "weights": rows(self.weights),
            "activations": rows(self.activations),
        }


@dataclass
class CompressedLayer:
    name: str
    grid: QuantGrid
    shape: tuple[int, ...]
    bias: np.ndarray
    codebook: Codebook
    payload: Payload
    count: int
    symbols: Optional[np.ndarray] = None

    def weights(self) -> np.ndarray:
        """Reconstructed weight tensor (decodes the payload if needed)."""
        if self.symbols is None:
            self.symbols = decode_layer(self.payload, self.codebook, self.count)
        return (self.symbols * self.grid.step).reshape(self.shape)

    def bits(self) -> LayerBits:
        return LayerBits(self.name, self.count, self.payload.bit_length, len(self.codebook.lengths))


@dataclass
class CompressedStream:
    """Huffman-coded activation indices of one layer."""

    name: str
    codebook: Codebook
    payload: Payload
    count: int
    symbols: Optional[np.ndarray] = None

    def bits(self) -> LayerBits:
        return LayerBits(self.name, self.count, self.payload.bit_length, len(self.codebook.lengths))


@dataclass
class CompressedModel:
    bits: int
    layers: list[CompressedLayer]
    activations: list[CompressedStream] = field(default_factory=list)
    version: tuple[int, int] = COMPRESSED_VERSION

    def bit_report(self) -> BitReport:
        return BitReport(weights=[layer.bits() for layer in self.layers],
                         activations=[stream.bits() for stream in self.activations])


def _encode_symbols(name: str, symbols: np.ndarray) -> tuple[Codebook, Payload, LayerBits]:
    codebook = build_codebook(symbols)
    payload = encode_layer(symbols, codebook)
    return codebook, payload, LayerBits(name, int(symbols.size), payload.bit_length, len(codebook.lengths))


def compress_model(model: Model, rng: np.random.Generator, activation_batch: Optional[np.ndarray] = None,
                   topk: Optional[int] = None) -> CompressedModel:
    """
    Quantize every weighted layer with one Q_p draw and Huffman-code it.

    With an activation batch, one cdl-mode inference through those same
    weights also yields the activation streams, which are coded and stored
    alongside.

    Args:
        model: Model with quantizer parameters
        rng: Stream for the Q_p draws
        activation_batch: Inputs for the activation measurement (None to skip)
        topk: Truncation of the activation CPMFs

    Returns:
        CompressedModel: Codebooks, payloads, grids, raw biases and activation streams
    """
    layers = []
    weights = quantize_weights(model, Mode.CDL, rng, with_grads=False)
    for layer, quantized in zip(model.weighted_layers(), weights):
        symbols = quantized.indices.ravel()
        codebook, payload, _ = _encode_symbols(layer.name, symbols)
        layers.append(CompressedLayer(
            name=layer.name,
            grid=layer.quant.weight_grid,
            shape=tuple(layer.weight.shape),
            bias=np.array(layer.bias, dtype=np.float64),
            codebook=codebook,
            payload=payload,
            count=int(symbols.size),
            symbols=symbols,
        ))

    streams = []
    if activation_batch is not None:
        trace = forward(model, activation_batch, Mode.CDL, rng=rng, weights=weights, topk=topk, with_grads=False)
        for ordinal, layer in enumerate(model.weighted_layers()):
            record = trace.activations.get(ordinal)
            if record is None or record.indices is None:
                continue
            symbols = record.indices.ravel()
            codebook, payload, _ = _encode_symbols(layer.name, symbols)
            streams.append(CompressedStream(layer.name, codebook, payload, int(symbols.size), symbols))
    return CompressedModel(bits=model.bits, layers=layers, activations=streams)


def avg_bits_metrics(model: Model, activation_batch: Optional[np.ndarray], rng: np.random.Generator,
                     topk: Optional[int] = None) -> BitReport:
    """
    Huffman-measured average bits per weight and per activation.

    Weights get one Q_p draw; activations come from one cdl-mode inference
    over the batch using those same weights. Each layer's stream gets its
    own codebook. Draws match ``compress_model`` on the same stream.

    Args:
        model: Model with quantizer parameters
        activation_batch: Inputs for the activation measurement (None to skip)
        rng: Stream for all Q_p draws
        topk: Truncation of the activation CPMFs

    Returns:
        BitReport: Per-layer payload and codebook bits
    """
    return compress_model(model, rng, activation_batch, topk).bit_report()


def _write_codebook_stream(record: ByteWriter, codebook: Codebook, count: int, payload: Payload) -> None:
    pairs = codebook.to_pairs()
    record.write_u16(len(pairs))
    for symbol, length in pairs:
        record.write_i32(symbol)
        record.write_u8(length)
    record.write_u64(count)
    record.write_u64(payload.bit_length)
    record.write_blob(payload.data)


def _read_codebook_stream(reader: ByteReader) -> tuple[list[tuple[int, int]], int, Payload]:
    pairs = [(reader.read_i32(), reader.read_u8()) for _ in range(reader.read_u16())]
    count = reader.read_u64()
    bit_length = reader.read_u64()
    return pairs, count, Payload(data=reader.read_blob(), bit_length=bit_length)


def _write_record(writer: ByteWriter, record: ByteWriter) -> None:
    body = record.getvalue()
    writer.write(body)
    writer.write_u32(zlib.crc32(body))


def _check_record(reader: ByteReader, start: int, name: str) -> None:
    end = reader.offset
    if reader.read_u32() != zlib.crc32(bytes(reader.data[start:end])):
        raise CorruptFileError(f"CRC mismatch in record '{name}'", start)


def compressed_bytes(compressed: CompressedModel) -> bytes:
    """Serialize a CompressedModel to the documented layout (in its own format version)."""
    major, minor = compressed.version
    writer = ByteWriter()
    writer.write(COMPRESSED_MAGIC)
    writer.write_u16(major)
    writer.write_u16(minor)
    writer.write_u8(compressed.bits)
    writer.write_u16(len(compressed.layers))

    for layer in compressed.layers:
        record = ByteWriter()
        record.write_blob(layer.name.encode("utf-8"))
        record.write_u8(int(layer.grid.signed))
        record.write_u8(layer.grid.bits)
        record.write_f64(layer.grid.step)
        record.write_u8(len(layer.shape))
        for dim in layer.shape:
            record.write_u32(dim)
        record.write_u32(layer.bias.size)
        record.write_f64_array(layer.bias)
        _write_codebook_stream(record, layer.codebook, layer.count, layer.payload)
        _write_record(writer, record)

    if minor >= 1:
        writer.write_u16(len(compressed.activations))
        for stream in compressed.activations:
            record = ByteWriter()
            record.write_blob(stream.name.encode("utf-8"))
            _write_codebook_stream(record, stream.codebook, stream.count, stream.payload)
            _write_record(writer, record)
    elif compressed.activations:
        raise ValueError(f"Format {major}.{minor} cannot hold activation streams")

    data = writer.getvalue()
    return data + hashlib.sha256(data).digest()


def write_compressed(compressed: CompressedModel, path: str | Path) -> bytes:
    """Write a CompressedModel atomically; returns the bytes written."""
    data = compressed_bytes(compressed)
    atomic_write_bytes(path, data)
    logger.info(f"Compressed model written to {path} ({len(data)} bytes)")
    return data


def parse_compressed(data: bytes) -> CompressedModel:
    """
    Parse and fully decode a compressed model.

    Files of format 1.0 carry no activation streams.

    Raises:
        CorruptFileError: With the byte offset where parsing or checking failed
    """
    if len(data) < _DIGEST_SIZE:
        raise CorruptFileError("File shorter than its checksum", 0)

    body_end = len(data) - _DIGEST_SIZE
    reader = ByteReader(data[:body_end])
    record_start = 0
    try:
        if reader.read(4) != COMPRESSED_MAGIC:
            raise CorruptFileError("Not a compressed model (bad magic)", 0)
        major, minor = reader.read_u16(), reader.read_u16()
        if major != COMPRESSED_VERSION[0]:
            raise CorruptFileError(f"Unsupported version {major}.{minor}", 4)
        bits = reader.read_u8()

        layers = []
        for _ in range(reader.read_u16()):
            record_start = reader.offset
            name = reader.read_blob().decode("utf-8")
            signed = bool(reader.read_u8())
            grid_bits = reader.read_u8()
            step = reader.read_f64()
            shape = tuple(reader.read_u32() for _ in range(reader.read_u8()))
            bias = reader.read_f64_array(reader.read_u32())
            pairs, count, payload = _read_codebook_stream(reader)
            _check_record(reader, record_start, name)

            codebook = Codebook.from_pairs(pairs)
            layer = CompressedLayer(name=name, grid=QuantGrid(grid_bits, step, signed), shape=shape, bias=bias,
                                    codebook=codebook, payload=payload, count=count)
            if int(np.prod(shape)) != count:
                raise CorruptFileError(f"Layer '{name}' shape {shape} does not hold {count} symbols", record_start)
            layer.symbols = decode_layer(payload, codebook, count)
            layers.append(layer)

        streams = []
        if minor >= 1:
            for _ in range(reader.read_u16()):
                record_start = reader.offset
                name = reader.read_blob().decode("utf-8")
                pairs, count, payload = _read_codebook_stream(reader)
                _check_record(reader, record_start, name)
                codebook = Codebook.from_pairs(pairs)
                streams.append(CompressedStream(name, codebook, payload, count,
                                                decode_layer(payload, codebook, count)))
    except StreamError as e:
        raise CorruptFileError("Truncated file", e.offset) from e
    except (CodecError, QuantizationError, UnicodeDecodeError, ValueError) as e:
        raise CorruptFileError(f"Malformed record: {e}", record_start) from e

    if reader.remaining:
        raise CorruptFileError("Unexpected bytes before checksum", reader.offset)
    if hashlib.sha256(data[:body_end]).digest() != data[body_end:]:
        raise CorruptFileError("SHA-256 footer mismatch", body_end)

    return CompressedModel(bits=bits, layers=layers, activations=streams, version=(major, minor))


def read_compressed(path: str | Path) -> CompressedModel:
    path = Path(path)
    if not path.exists():
        raise CorruptFileError(f"File not found: {path}", 0)
    return parse_compressed(path.read_bytes())


def verify_compressed(path: str | Path) -> BitReport:
    """
    Decode a compressed file, re-encode every weight layer and activation
    stream and compare byte for byte.

    Returns:
        BitReport: Weight and activation metrics recomputed from the decoded symbols

    Raises:
        CorruptFileError: If anything fails to match
    """
    data = Path(path).read_bytes() if Path(path).exists() else b""
    if not data:
        raise CorruptFileError(f"File not found or empty: {path}", 0)
    compressed = parse_compressed(data)

    report = BitReport()
    for stream, target in [(layer, report.weights) for layer in compressed.layers] + \
                          [(stream, report.activations) for stream in compressed.activations]:
        codebook, payload, bits = _encode_symbols(stream.name, stream.symbols)
        if codebook.to_pairs() != stream.codebook.to_pairs() or payload != stream.payload:
            raise CorruptFileError(f"Stream '{stream.name}' does not re-encode identically", 0)
        target.append(bits)

    if compressed_bytes(compressed) != data:
        raise CorruptFileError("Re-serialized file differs from the input", 0)
    return report


def load_into_model(compressed: CompressedModel, model: Model) -> Model:
    """
    Copy decoded weights and raw biases into a model of the same architecture.

    Raises:
        CorruptFileError: If layer names or shapes do not match
    """
    weighted = model.weighted_layers()
    if len(weighted) != len(compressed.layers):
        raise CorruptFileError(f"Model has {len(weighted)} weighted layers, file has {len(compressed.layers)}", 0)
    for layer, stored in zip(weighted, compressed.layers):
        if tuple(layer.weight.shape) != stored.shape:
            raise CorruptFileError(f"Shape mismatch for {layer.name}: {layer.weight.shape} vs {stored.shape}", 0)
        layer.weight = stored.weights()
        layer.bias = stored.bias.copy()
    return model
