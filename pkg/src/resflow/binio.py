"""Little-endian binary readers/writers for the on-disk model formats.

Everything multi-byte is little-endian regardless of host byte order.
Numeric payloads are written as raw arrays; reads validate remaining
length before slicing so a truncated file fails with TruncatedError
instead of a numpy shape error.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = ["TruncatedError", "ByteReader", "ByteWriter"]


class TruncatedError(ValueError):
    """File ended before the declared payload was complete."""


class ByteReader:
    def __init__(self, data: bytes, name: str = "file"):
        self._data = data
        self._pos = 0
        self._name = name

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise TruncatedError(
                f"{self._name}: needed {n} bytes at offset {self._pos}, "
                f"have {len(self._data) - self._pos}"
            )
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def f64_array(self, count: int, shape=None) -> np.ndarray:
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").astype(
            np.float64, copy=True
        )
        return arr.reshape(shape) if shape is not None else arr

    def f32_array(self, count: int, shape=None) -> np.ndarray:
        arr = np.frombuffer(self.take(4 * count), dtype="<f4")
        arr = arr.astype(np.float64, copy=True)
        return arr.reshape(shape) if shape is not None else arr

    def u32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<u4").astype(np.int64)

    def i32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<i4").astype(np.int64)

    def u8_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(count), dtype=np.uint8).copy()

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self._data)

    def expect_end(self) -> None:
        if not self.exhausted:
            raise ValueError(
                f"{self._name}: {len(self._data) - self._pos} trailing bytes"
            )


class ByteWriter:
    def __init__(self):
        self._chunks: list[bytes] = []

    def raw(self, data: bytes) -> None:
        self._chunks.append(bytes(data))

    def u8(self, v: int) -> None:
        self._chunks.append(struct.pack("<B", v))

    def u16(self, v: int) -> None:
        self._chunks.append(struct.pack("<H", v))

    def u32(self, v: int) -> None:
        self._chunks.append(struct.pack("<I", v))

    def i64(self, v: int) -> None:
        self._chunks.append(struct.pack("<q", v))

    def f64(self, v: float) -> None:
        self._chunks.append(struct.pack("<d", v))

    def f64_array(self, arr: np.ndarray) -> None:
        self._chunks.append(
            np.ascontiguousarray(arr, dtype="<f8").tobytes()
        )

    def f32_array(self, arr: np.ndarray) -> None:
        self._chunks.append(
            np.ascontiguousarray(arr, dtype="<f4").tobytes()
        )

    def u32_array(self, arr: np.ndarray) -> None:
        self._chunks.append(
            np.ascontiguousarray(arr, dtype="<u4").tobytes()
        )

    def i32_array(self, arr: np.ndarray) -> None:
        self._chunks.append(
            np.ascontiguousarray(arr, dtype="<i4").tobytes()
        )

    def u8_array(self, arr: np.ndarray) -> None:
        self._chunks.append(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._chunks)
