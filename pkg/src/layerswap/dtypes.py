"""Element types of the tensor container and their FLOAT32 codecs.

Decoding is always exact (every F16/BF16 value is representable in F32).
Encoding from F32 rounds to nearest, ties to even.
"""
from __future__ import annotations

import enum

import numpy as np


class DType(enum.Enum):
    FLOAT32 = "F32"
    FLOAT16 = "F16"
    BFLOAT16 = "BF16"

    @property
    def itemsize(self) -> int:
        return 4 if self is DType.FLOAT32 else 2

    @property
    def storage(self) -> np.dtype:
        """numpy dtype used to hold the raw little-endian elements."""
        return _STORAGE[self]

    @classmethod
    def parse(cls, code: str) -> "DType":
        try:
            return cls(code)
        except ValueError:
            raise ValueError(f"unknown dtype {code!r}; expected one of F32, F16, BF16") from None


_STORAGE = {
    DType.FLOAT32: np.dtype("<f4"),
    DType.FLOAT16: np.dtype("<f2"),
    DType.BFLOAT16: np.dtype("<u2"),
}


def decode(buf: bytes | memoryview | np.ndarray, dtype: DType) -> np.ndarray:
    """Decode raw little-endian bytes into a flat float32 array."""
    raw = np.frombuffer(buf, dtype=dtype.storage) if not isinstance(buf, np.ndarray) else buf
    if dtype is DType.FLOAT32:
        return raw.astype(np.float32, copy=True)
    if dtype is DType.FLOAT16:
        return raw.astype(np.float32)
    return (raw.astype(np.uint32) << 16).view(np.float32)


def bf16_bits(x: np.ndarray) -> np.ndarray:
    """Round float32 values to bfloat16 bit patterns (nearest, ties to even)."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    bits = x.view(np.uint32)
    rounded = bits + np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))
    out = (rounded >> np.uint32(16)).astype(np.uint16)
    nan = np.isnan(x)
    if nan.any():
        # keep sign and the top payload bits, force the quiet bit
        out[nan] = ((bits[nan] >> np.uint32(16)) | np.uint32(0x0040)).astype(np.uint16)
    return out


def encode(x: np.ndarray, dtype: DType) -> bytes:
    """Encode float32 (or float64) values into raw little-endian bytes of ``dtype``."""
    x32 = np.asarray(x, dtype=np.float32)
    if dtype is DType.FLOAT32:
        return x32.astype("<f4", copy=False).tobytes()
    if dtype is DType.FLOAT16:
        with np.errstate(over="ignore"):
            return x32.astype("<f2").tobytes()
    return bf16_bits(x32).astype("<u2", copy=False).tobytes()


def ulp(x: np.ndarray, dtype: DType) -> np.ndarray:
    """Spacing of ``dtype`` at each value of ``x`` (as float32)."""
    x = np.abs(np.asarray(x, dtype=np.float32))
    if dtype is DType.FLOAT32:
        return np.spacing(x)
    if dtype is DType.FLOAT16:
        return np.spacing(x.astype(np.float16)).astype(np.float32)
    # bf16 keeps 8 significand bits of the float32 exponent range
    bits = decode(bf16_bits(x), DType.BFLOAT16)
    return np.maximum(np.spacing(bits) * 2.0**16, np.float32(2.0**-133))
