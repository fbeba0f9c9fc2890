"""
Binary model checkpoints.

Layout (little-endian)::

    magic "CDLC" | u16 major | u16 minor | u8 bits
    u8 ndim | u32 dim * ndim                      model input shape
    u16 layer count
    per layer:
        u8 kind (0 dense, 1 conv2d, 2 relu, 3 flatten) | blob name
        dense:  u32 in | u32 out | u8 exempt_8bit
        conv2d: u32 in | u32 out | u8 kernel | u8 stride | u8 padding (0 same, 1 valid) | u8 exempt_8bit
    per weighted layer, in order:
        f64 weights (row-major) | f64 bias
        u8 has_quant
        if has_quant: f64 log_q | f64 log_s | f64 log_alpha | f64 log_beta
                      u8 bits | u8 quantize_activations | u32 activation_count
    blob metadata (UTF-8 JSON, sorted keys)

A blob is a u32 length followed by that many bytes. Floats are stored
verbatim so a save/load cycle reproduces every parameter bit for bit.
"""

import json
import logging
from pathlib import Path
from typing import Any, Optional

from cdl.codec.bitstream import ByteReader, ByteWriter, StreamError
from cdl.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from cdl.net.layers import WEIGHTED_KINDS, Conv2d, Dense, Flatten, LayerQuantParams, ReLU
from cdl.net.model import Model, ShapeError
from cdl.utils import atomic_write_bytes


logger = logging.getLogger(__name__)

_KINDS = {"dense": 0, "conv2d": 1, "relu": 2, "flatten": 3}
_PADDINGS = {"same": 0, "valid": 1}


class CheckpointError(Exception):
    """Raised when a checkpoint cannot be parsed."""
    pass


def checkpoint_bytes(model: Model, metadata: Optional[dict[str, Any]] = None) -> bytes:
    """Serialize a model (and optional JSON metadata) to the checkpoint layout."""
    writer = ByteWriter()
    writer.write(CHECKPOINT_MAGIC)
    writer.write_u16(CHECKPOINT_VERSION[0])
    writer.write_u16(CHECKPOINT_VERSION[1])
    writer.write_u8(model.bits)
    writer.write_u8(len(model.input_shape))
    for dim in model.input_shape:
        writer.write_u32(dim)

    writer.write_u16(len(model.layers))
    for layer in model.layers:
        writer.write_u8(_KINDS[layer.kind])
        writer.write_blob(layer.name.encode("utf-8"))
        if layer.kind == "dense":
            writer.write_u32(layer.in_features)
            writer.write_u32(layer.out_features)
            writer.write_u8(int(layer.exempt_8bit))
        elif layer.kind == "conv2d":
            writer.write_u32(layer.in_channels)
            writer.write_u32(layer.out_channels)
            writer.write_u8(layer.kernel_size)
            writer.write_u8(layer.stride)
            writer.write_u8(_PADDINGS[layer.padding])
            writer.write_u8(int(layer.exempt_8bit))

    for layer in model.weighted_layers():
        writer.write_f64_array(layer.weight)
        writer.write_f64_array(layer.bias)
        quant = layer.quant
        writer.write_u8(int(quant is not None))
        if quant is not None:
            for value in (quant.log_q, quant.log_s, quant.log_alpha, quant.log_beta):
                writer.write_f64(value)
            writer.write_u8(quant.bits)
            writer.write_u8(int(quant.quantize_activations))
            writer.write_u32(quant.activation_count)

    writer.write_blob(json.dumps(metadata or {}, sort_keys=True).encode("utf-8"))
    return writer.getvalue()


def model_from_bytes(data: bytes) -> tuple[Model, dict[str, Any]]:
    """
    Parse checkpoint bytes.

    Returns:
        tuple: (model, metadata)

    Raises:
        CheckpointError: On a bad magic, unknown major version or truncation
    """
    reader = ByteReader(data)
    try:
        if reader.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError("Not a checkpoint file (bad magic)")
        major, minor = reader.read_u16(), reader.read_u16()
        if major != CHECKPOINT_VERSION[0]:
            raise CheckpointError(f"Unsupported checkpoint version {major}.{minor}")
        bits = reader.read_u8()
        input_shape = tuple(reader.read_u32() for _ in range(reader.read_u8()))

        layers = []
        for _ in range(reader.read_u16()):
            kind = reader.read_u8()
            name = reader.read_blob().decode("utf-8")
            if kind == _KINDS["dense"]:
                in_features, out_features = reader.read_u32(), reader.read_u32()
                layers.append(Dense(in_features, out_features, name=name, exempt_8bit=bool(reader.read_u8())))
            elif kind == _KINDS["conv2d"]:
                in_channels, out_channels = reader.read_u32(), reader.read_u32()
                kernel, stride = reader.read_u8(), reader.read_u8()
                padding = "same" if reader.read_u8() == _PADDINGS["same"] else "valid"
                layers.append(Conv2d(in_channels, out_channels, kernel, stride=stride, padding=padding,
                                     name=name, exempt_8bit=bool(reader.read_u8())))
            elif kind == _KINDS["relu"]:
                layers.append(ReLU(name=name))
            elif kind == _KINDS["flatten"]:
                layers.append(Flatten(name=name))
            else:
                raise CheckpointError(f"Unknown layer kind {kind} at offset {reader.offset - 1}")

        for layer in layers:
            if layer.kind not in WEIGHTED_KINDS:
                continue
            layer.weight = reader.read_f64_array(layer.weight.size).reshape(layer.weight.shape)
            layer.bias = reader.read_f64_array(layer.bias.size)
            if reader.read_u8():
                log_q, log_s, log_alpha, log_beta = (reader.read_f64() for _ in range(4))
                layer.quant = LayerQuantParams(
                    log_q=log_q,
                    log_s=log_s,
                    log_alpha=log_alpha,
                    log_beta=log_beta,
                    bits=reader.read_u8(),
                    quantize_activations=bool(reader.read_u8()),
                    weight_count=int(layer.weight.size),
                    activation_count=reader.read_u32(),
                )

        metadata = json.loads(reader.read_blob().decode("utf-8"))
        model = Model(layers, input_shape, bits)
    except StreamError as e:
        raise CheckpointError(f"Truncated checkpoint: {e}") from e
    except (ShapeError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Malformed checkpoint: {e}") from e

    if reader.remaining:
        raise CheckpointError(f"{reader.remaining} trailing bytes after checkpoint at offset {reader.offset}")
    return model, metadata


def save_checkpoint(model: Model, path: str | Path, metadata: Optional[dict[str, Any]] = None) -> None:
    """Write a checkpoint atomically (temp file, then rename)."""
    atomic_write_bytes(path, checkpoint_bytes(model, metadata))
    logger.info(f"Checkpoint written to {path}")


def load_checkpoint(path: str | Path) -> tuple[Model, dict[str, Any]]:
    """
    Read a checkpoint from disk.

    Raises:
        CheckpointError: If the file is missing or malformed
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    return model_from_bytes(path.read_bytes())
