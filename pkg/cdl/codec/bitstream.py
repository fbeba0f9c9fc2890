"""Little-endian byte stream writer/reader shared by the binary file formats."""

import io
import struct

import numpy as np


class StreamError(Exception):
    """Raised when a read runs past the end of the buffer."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class ByteWriter:
    def __init__(self):
        self.stream = io.BytesIO()

    @property
    def offset(self) -> int:
        return self.stream.tell()

    def write(self, buffer: bytes) -> None:
        self.stream.write(buffer)

    def write_u8(self, val: int) -> None:
        self.write(struct.pack("<B", val))

    def write_u16(self, val: int) -> None:
        self.write(struct.pack("<H", val))

    def write_u32(self, val: int) -> None:
        self.write(struct.pack("<I", val))

    def write_u64(self, val: int) -> None:
        self.write(struct.pack("<Q", val))

    def write_i32(self, val: int) -> None:
        self.write(struct.pack("<i", val))

    def write_f64(self, val: float) -> None:
        self.write(struct.pack("<d", val))

    def write_f64_array(self, values: np.ndarray) -> None:
        self.write(np.ascontiguousarray(values, dtype="<f8").tobytes())

    def write_blob(self, data: bytes) -> None:
        """Length-prefixed (u32) byte string."""
        self.write_u32(len(data))
        self.write(data)

    def getvalue(self) -> bytes:
        return self.stream.getvalue()


class ByteReader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = memoryview(data)
        self.offset = offset

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def read(self, length: int) -> bytes:
        if length < 0 or self.offset + length > len(self.data):
            raise StreamError(f"Truncated stream: wanted {length} bytes, {self.remaining} left", self.offset)
        chunk = bytes(self.data[self.offset:self.offset + length])
        self.offset += length
        return chunk

    def _unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))[0]

    def read_u8(self) -> int:
        return self._unpack("<B")

    def read_u16(self) -> int:
        return self._unpack("<H")

    def read_u32(self) -> int:
        return self._unpack("<I")

    def read_u64(self) -> int:
        return self._unpack("<Q")

    def read_i32(self) -> int:
        return self._unpack("<i")

    def read_f64(self) -> float:
        return self._unpack("<d")

    def read_f64_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.read(8 * count), dtype="<f8").astype(np.float64)

    def read_blob(self) -> bytes:
        return self.read(self.read_u32())
