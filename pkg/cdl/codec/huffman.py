"""
Canonical Huffman coding of quantization symbols (grid indices).

Code lengths come from a heap-built Huffman tree with fully specified tie
breaking: nodes are ordered by (frequency, smallest symbol they contain),
so among equal frequencies the node holding the lower symbol is merged
first. Codewords are then assigned canonically in (length, symbol) order,
which means only (symbol, length) pairs need to be stored.

A stream with a single distinct symbol gets a 1-bit code.
"""

import heapq
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable

import numpy as np

from cdl.constants import CHUNK_ROWS


logger = logging.getLogger(__name__)


class CodecError(Exception):
    """Raised when symbols cannot be encoded or a payload cannot be decoded."""
    pass


@dataclass(frozen=True)
class Payload:
    """Packed MSB-first bit stream and its exact length in bits."""

    data: bytes
    bit_length: int


@dataclass(frozen=True)
class Codebook:
    """Canonical prefix code: symbol -> code length, plus the source histogram."""

    lengths: dict[int, int]
    histogram: dict[int, int]

    @cached_property
    def ordered(self) -> list[tuple[int, int]]:
        """(symbol, length) pairs in canonical order."""
        return sorted(self.lengths.items(), key=lambda item: (item[1], item[0]))

    @cached_property
    def codes(self) -> dict[int, tuple[int, int]]:
        """symbol -> (codeword, length)."""
        codes = {}
        code = 0
        previous = 0
        for symbol, length in self.ordered:
            code <<= length - previous
            previous = length
            codes[symbol] = (code, length)
            code += 1
        return codes

    @property
    def max_length(self) -> int:
        return max(self.lengths.values())

    @property
    def total_count(self) -> int:
        return sum(self.histogram.values())

    def payload_bits(self) -> int:
        """Bits the histogram's stream occupies under this code."""
        return sum(count * self.lengths[symbol] for symbol, count in self.histogram.items())

    def average_length(self) -> float:
        total = self.total_count
        return self.payload_bits() / total if total else 0.0

    def kraft_sum(self, padded: bool = True) -> float:
        """
        Σ 2^-length over the codewords.

        The single-symbol code is padded with its unused sibling leaf, so
        the padded sum of a complete code is exactly 1.
        """
        total = sum(2.0 ** -length for length in self.lengths.values())
        if padded and len(self.lengths) == 1:
            total += 0.5
        return total

    def to_pairs(self) -> list[tuple[int, int]]:
        return list(self.ordered)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]]) -> "Codebook":
        """Rebuild a codebook from stored (symbol, length) pairs (histogram unknown)."""
        lengths = {int(symbol): int(length) for symbol, length in pairs}
        if not lengths:
            raise CodecError("Codebook has no symbols")
        if any(length < 1 for length in lengths.values()):
            raise CodecError("Code lengths must be at least 1")
        book = cls(lengths=lengths, histogram={})
        if book.kraft_sum(padded=True) > 1.0 + 1e-12:
            raise CodecError("Code lengths violate the Kraft inequality")
        return book


def build_codebook(symbols) -> Codebook:
    """
    Build a canonical Huffman codebook from the empirical histogram.

    Args:
        symbols: Stream of integer symbols (any iterable or array)

    Returns:
        Codebook: Code lengths and the histogram they came from

    Raises:
        CodecError: If the stream is empty
    """
    values, counts = np.unique(np.asarray(symbols, dtype=np.int64).ravel(), return_counts=True)
    if values.size == 0:
        raise CodecError("Cannot build a codebook from an empty stream")

    histogram = {int(symbol): int(count) for symbol, count in zip(values, counts)}
    if len(histogram) == 1:
        return Codebook(lengths={int(values[0]): 1}, histogram=histogram)

    # Heap of (frequency, smallest symbol, member symbols)
    heap = [(count, symbol, [symbol]) for symbol, count in histogram.items()]
    heapq.heapify(heap)
    lengths = dict.fromkeys(histogram, 0)
    while len(heap) > 1:
        freq_a, low_a, members_a = heapq.heappop(heap)
        freq_b, low_b, members_b = heapq.heappop(heap)
        for symbol in members_a:
            lengths[symbol] += 1
        for symbol in members_b:
            lengths[symbol] += 1
        heapq.heappush(heap, (freq_a + freq_b, min(low_a, low_b), members_a + members_b))

    return Codebook(lengths=lengths, histogram=histogram)


def _code_table(codebook: Codebook):
    """Symbol lookup plus a (symbols, max_length) bit matrix and length vector."""
    ordered = codebook.ordered
    symbols = np.array([symbol for symbol, _ in ordered], dtype=np.int64)
    width = codebook.max_length
    bits = np.zeros((len(ordered), width), dtype=np.uint8)
    lengths = np.zeros(len(ordered), dtype=np.int64)
    for row, (symbol, _) in enumerate(ordered):
        code, length = codebook.codes[symbol]
        lengths[row] = length
        for position in range(length):
            bits[row, position] = (code >> (length - 1 - position)) & 1
    return symbols, bits, lengths


def encode_layer(symbols, codebook: Codebook) -> Payload:
    """
    Encode a symbol stream MSB-first.

    Args:
        symbols: Integer symbols (any shape, read in C order)
        codebook: Code covering every symbol of the stream

    Returns:
        Payload: Packed bytes (last byte zero-padded) and exact bit length

    Raises:
        CodecError: If a symbol has no codeword
    """
    stream = np.asarray(symbols, dtype=np.int64).ravel()
    table_symbols, table_bits, table_lengths = _code_table(codebook)

    order = np.argsort(table_symbols)
    position = np.searchsorted(table_symbols[order], stream)
    position = np.minimum(position, table_symbols.size - 1)
    rows = order[position]
    missing = table_symbols[rows] != stream
    if np.any(missing):
        raise CodecError(f"Symbol {int(stream[np.argmax(missing)])} is not in the codebook")

    mask_template = np.arange(table_bits.shape[1])[None, :] < table_lengths[:, None]
    pieces = []
    step = max(1, CHUNK_ROWS * 16)
    for start in range(0, stream.size, step):
        chunk_rows = rows[start:start + step]
        pieces.append(table_bits[chunk_rows][mask_template[chunk_rows]])
    bit_array = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.uint8)

    return Payload(data=np.packbits(bit_array).tobytes(), bit_length=int(bit_array.size))


def decode_layer(payload: Payload, codebook: Codebook, count: int) -> np.ndarray:
    """
    Decode exactly ``count`` symbols from a payload.

    Args:
        payload: Bytes and bit length produced by encode_layer
        codebook: The codebook used to encode
        count: Number of symbols to read

    Returns:
        np.ndarray: int64 symbols

    Raises:
        CodecError: On a truncated payload, an invalid codeword or leftover bits
    """
    if payload.bit_length > 8 * len(payload.data):
        raise CodecError(f"Payload claims {payload.bit_length} bits but holds {8 * len(payload.data)}")
    bits = np.unpackbits(np.frombuffer(payload.data, dtype=np.uint8))[:payload.bit_length].tolist()

    # Canonical decoding tables: first code and first slot per length
    max_length = codebook.max_length
    count_per_length = [0] * (max_length + 1)
    for _, length in codebook.ordered:
        count_per_length[length] += 1
    ordered_symbols = [symbol for symbol, _ in codebook.ordered]
    first_code = [0] * (max_length + 1)
    first_slot = [0] * (max_length + 1)
    code = 0
    slot = 0
    for length in range(1, max_length + 1):
        code <<= 1
        first_code[length] = code
        first_slot[length] = slot
        code += count_per_length[length]
        slot += count_per_length[length]

    out = np.empty(count, dtype=np.int64)
    cursor = 0
    total = len(bits)
    for index in range(count):
        code = 0
        for length in range(1, max_length + 1):
            if cursor >= total:
                raise CodecError(f"Truncated payload after {index} of {count} symbols")
            code = (code << 1) | bits[cursor]
            cursor += 1
            offset = code - first_code[length]
            if 0 <= offset < count_per_length[length]:
                out[index] = ordered_symbols[first_slot[length] + offset]
                break
        else:
            raise CodecError(f"Invalid codeword at bit {cursor}")

    if cursor != total:
        raise CodecError(f"{total - cursor} unused bits after {count} symbols")
    return out
