"""Single-file tensor container: lazy reading, streaming atomic writing, comparison.

File layout (safetensors-compatible)::

    [u64 little-endian header length N][N bytes UTF-8 JSON header][data buffer]

The header maps every tensor name to ``{"dtype", "shape", "data_offsets"}``
with offsets relative to the start of the data buffer, plus an optional
``"__metadata__"`` string map.
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

from .dtypes import DType, decode, encode

# raw bytes per streamed chunk; bounds merge memory independently of tensor size
CHUNK_BYTES = 4 << 20
_MAX_HEADER = 100 << 20


class CheckpointFormatError(ValueError):
    """The file does not conform to the container layout."""


class CompatibilityError(ValueError):
    """Two checkpoints do not share names, dtypes and shapes."""

    def __init__(self, report: "CompatReport"):
        super().__init__(report.describe())
        self.report = report


RowReader = Callable[[int, int], bytes]


class TensorRecord:
    """One named tensor. The payload is produced on demand by ``read_rows``.

    A "row" is a slice along the first dimension; rank-0 and rank-1 tensors
    consist of a single row.
    """

    __slots__ = ("name", "dtype", "shape", "_reader", "chunkable")

    def __init__(
        self,
        name: str,
        dtype: DType,
        shape: Iterable[int],
        reader: RowReader | bytes,
        chunkable: bool = True,
    ):
        self.name = name
        self.dtype = dtype
        self.shape = tuple(int(s) for s in shape)
        if any(s < 0 for s in self.shape):
            raise ValueError(f"{name}: negative dimension in shape {self.shape}")
        if isinstance(reader, (bytes, bytearray, memoryview)):
            payload = bytes(reader)
            if len(payload) != self.nbytes:
                raise ValueError(
                    f"{name}: buffer has {len(payload)} bytes, shape {list(self.shape)} "
                    f"of {dtype.value} needs {self.nbytes}"
                )
            row = self.row_nbytes
            self._reader = lambda a, b: payload[a * row : b * row]
        else:
            self._reader = reader
        self.chunkable = chunkable

    def __repr__(self) -> str:
        return f"TensorRecord({self.name!r}, {self.dtype.value}, {list(self.shape)})"

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.numel * self.dtype.itemsize

    @property
    def n_rows(self) -> int:
        return self.shape[0] if self.rank >= 2 else 1

    @property
    def row_shape(self) -> tuple[int, ...]:
        return self.shape[1:] if self.rank >= 2 else self.shape

    @property
    def row_nbytes(self) -> int:
        return math.prod(self.row_shape) * self.dtype.itemsize

    def read_rows(self, start: int, stop: int) -> bytes:
        data = self._reader(start, stop)
        expected = (stop - start) * self.row_nbytes
        if len(data) != expected:
            raise CheckpointFormatError(
                f"{self.name}: read {len(data)} bytes for rows [{start}, {stop}), expected {expected}"
            )
        return data

    @property
    def data(self) -> bytes:
        return self.read_rows(0, self.n_rows)

    def rows_f32(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Rows ``[start, stop)`` decoded to float32, shaped ``(rows, *row_shape)``."""
        stop = self.n_rows if stop is None else stop
        return decode(self.read_rows(start, stop), self.dtype).reshape((stop - start, *self.row_shape))

    def to_f32(self) -> np.ndarray:
        return decode(self.data, self.dtype).reshape(self.shape)

    def chunks(self, max_bytes: int = CHUNK_BYTES) -> list[tuple[int, int]]:
        """Row ranges covering the tensor, each at most ``max_bytes`` when possible."""
        n = self.n_rows
        if not self.chunkable or self.row_nbytes == 0:
            return [(0, n)]
        step = max(1, max_bytes // self.row_nbytes)
        return [(a, min(a + step, n)) for a in range(0, n, step)] or [(0, 0)]

    def renamed(self, name: str) -> "TensorRecord":
        return TensorRecord(name, self.dtype, self.shape, self._reader, self.chunkable)

    @classmethod
    def from_array(cls, name: str, values: np.ndarray, dtype: DType) -> "TensorRecord":
        values = np.asarray(values)
        return cls(name, dtype, values.shape, encode(values, dtype))


class Checkpoint(Mapping[str, TensorRecord]):
    """Ordered map of tensor records, iterated lexicographically by name."""

    def __init__(self, tensors: Iterable[TensorRecord] | Mapping[str, TensorRecord] = (), metadata=None, path=None):
        records = tensors.values() if isinstance(tensors, Mapping) else tensors
        table: dict[str, TensorRecord] = {}
        for rec in records:
            if rec.name in table:
                raise ValueError(f"duplicate tensor name {rec.name!r}")
            table[rec.name] = rec
        self._tensors = {k: table[k] for k in sorted(table)}
        self.metadata: dict[str, str] | None = dict(metadata) if metadata else None
        self.path = path

    def __getitem__(self, name: str) -> TensorRecord:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        src = f" from {self.path}" if self.path else ""
        return f"<Checkpoint {len(self)} tensors{src}>"

    def index(self) -> dict[str, tuple[DType, tuple[int, ...]]]:
        return {k: (r.dtype, r.shape) for k, r in self._tensors.items()}

    @property
    def nbytes(self) -> int:
        return sum(r.nbytes for r in self._tensors.values())

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype: DType = DType.FLOAT32, metadata=None) -> "Checkpoint":
        return cls((TensorRecord.from_array(k, v, dtype) for k, v in arrays.items()), metadata=metadata)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: r.to_f32() for k, r in self._tensors.items()}


# ---------------------------------------------------------------------------
# reading


def _file_reader(path: str, offset: int, row_nbytes: int) -> RowReader:
    def read(start: int, stop: int) -> bytes:
        with open(path, "rb") as fh:
            fh.seek(offset + start * row_nbytes)
            return fh.read((stop - start) * row_nbytes)

    return read


def _parse_shape(name: str, shape) -> list[int]:
    if not isinstance(shape, list) or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape):
        raise CheckpointFormatError(f"{name}: invalid shape {shape!r}")
    return shape


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    """Open a container. Only the header is read; payloads are fetched per tensor on access."""
    path = os.fspath(path)
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise CheckpointFormatError(f"{path}: truncated file ({size} bytes, no header length)")
        (n,) = struct.unpack("<Q", prefix)
        if n > _MAX_HEADER or 8 + n > size:
            raise CheckpointFormatError(f"{path}: header length {n} exceeds file size {size}")
        raw = fh.read(n)
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed header JSON: {exc}") from None
    if not isinstance(header, dict):
        raise CheckpointFormatError(f"{path}: header is not a JSON object")

    metadata = header.pop("__metadata__", None)
    if metadata is not None and (
        not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values())
    ):
        raise CheckpointFormatError(f"{path}: __metadata__ must be a string map")

    data_start = 8 + n
    data_len = size - data_start
    spans = []
    records = []
    for name, entry in header.items():
        if not isinstance(entry, dict) or not {"dtype", "shape", "data_offsets"} <= entry.keys():
            raise CheckpointFormatError(f"{path}: entry {name!r} lacks dtype/shape/data_offsets")
        try:
            dtype = DType.parse(entry["dtype"])
        except ValueError as exc:
            raise CheckpointFormatError(f"{path}: {name}: {exc}") from None
        shape = _parse_shape(name, entry["shape"])
        offsets = entry["data_offsets"]
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)
        ):
            raise CheckpointFormatError(f"{path}: {name}: invalid data_offsets {offsets!r}")
        begin, end = offsets
        if not 0 <= begin <= end:
            raise CheckpointFormatError(f"{path}: {name}: offsets {offsets} out of order")
        if end > data_len:
            raise CheckpointFormatError(
                f"{path}: {name}: offsets {offsets} beyond data buffer of {data_len} bytes (truncated file?)"
            )
        rec = TensorRecord(name, dtype, shape, lambda a, b: b"")
        if end - begin != rec.nbytes:
            raise CheckpointFormatError(
                f"{path}: {name}: {end - begin} bytes for shape {shape} of {dtype.value}, expected {rec.nbytes}"
            )
        rec._reader = _file_reader(path, data_start + begin, rec.row_nbytes)
        records.append(rec)
        if end > begin:
            spans.append((begin, end, name))
    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise CheckpointFormatError(f"{path}: tensors {n0!r} and {n1!r} overlap")
    return Checkpoint(records, metadata=metadata, path=path)


# ---------------------------------------------------------------------------
# writing


def _header_bytes(records: list[TensorRecord], metadata: Mapping[str, str] | None) -> bytes:
    header: dict[str, object] = {}
    if metadata:
        header["__metadata__"] = {k: str(metadata[k]) for k in sorted(metadata)}
    offset = 0
    for rec in records:
        header[rec.name] = {"dtype": rec.dtype.value, "shape": list(rec.shape), "data_offsets": [offset, offset + rec.nbytes]}
        offset += rec.nbytes
    raw = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    raw += b" " * (-len(raw) % 8)
    return struct.pack("<Q", len(raw)) + raw


class AtomicFile:
    """Binary file written to a temp sibling and renamed into place on success."""

    def __init__(self, path: str | os.PathLike, mode: str = "wb"):
        self.path = os.fspath(path)
        self.mode = mode

    def __enter__(self):
        directory = os.path.dirname(os.path.abspath(self.path))
        fd, self._tmp = tempfile.mkstemp(prefix=".tmp-", suffix="-" + os.path.basename(self.path), dir=directory)
        self._fh = os.fdopen(fd, self.mode)
        return self._fh

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self._fh.flush()
                os.fsync(self._fh.fileno())
            self._fh.close()
            if exc_type is None:
                os.replace(self._tmp, self.path)
        finally:
            if os.path.exists(self._tmp):
                os.unlink(self._tmp)
        return False


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    with AtomicFile(path, "w") as fh:
        fh.write(text)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike, threads: int = 1) -> None:
    """Stream every tensor to ``path`` in lexicographic order; atomic on success.

    Tensors are produced chunk by chunk, so lazily merged checkpoints are
    written without materialising more than ``threads`` chunks at a time.
    """
    records = [ckpt[k] for k in ckpt]
    jobs = [(rec, a, b) for rec in records for a, b in rec.chunks()]

    def produce(job):
        rec, a, b = job
        return rec.read_rows(a, b)

    with AtomicFile(path) as fh:
        fh.write(_header_bytes(records, ckpt.metadata))
        if threads <= 1:
            for job in jobs:
                fh.write(produce(job))
        else:
            with ThreadPoolExecutor(threads) as pool:
                window = []
                for job in jobs:
                    window.append(pool.submit(produce, job))
                    if len(window) >= threads:
                        fh.write(window.pop(0).result())
                for fut in window:
                    fh.write(fut.result())


# ---------------------------------------------------------------------------
# comparison


@dataclass
class CompatReport:
    missing_in_b: list[str] = field(default_factory=list)
    missing_in_a: list[str] = field(default_factory=list)
    mismatched: list[tuple[str, str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.missing_in_a or self.missing_in_b or self.mismatched)

    def __bool__(self) -> bool:
        return self.ok

    def describe(self) -> str:
        if self.ok:
            return "compatible"
        lines = [f"absent in b: {n}" for n in self.missing_in_b]
        lines += [f"absent in a: {n}" for n in self.missing_in_a]
        lines += [f"mismatch {n}: {x} vs {y}" for n, x, y in self.mismatched]
        return "incompatible checkpoints\n  " + "\n  ".join(lines)


def _sig(rec: TensorRecord) -> str:
    return f"{rec.dtype.value}{list(rec.shape)}"


def validate_compat(a: Checkpoint, b: Checkpoint) -> CompatReport:
    """Structural comparison; the mismatch report is returned, never raised."""
    report = CompatReport(
        missing_in_b=sorted(set(a) - set(b)),
        missing_in_a=sorted(set(b) - set(a)),
    )
    for name in sorted(set(a) & set(b)):
        if (a[name].dtype, a[name].shape) != (b[name].dtype, b[name].shape):
            report.mismatched.append((name, _sig(a[name]), _sig(b[name])))
    return report


def require_compat(first: Checkpoint, *others: Checkpoint) -> None:
    for other in others:
        report = validate_compat(first, other)
        if not report.ok:
            raise CompatibilityError(report)


def max_abs_diff(x: np.ndarray, y: np.ndarray) -> float:
    """Max |x - y| in float32; matching NaNs count as equal, unmatched NaNs as inf."""
    if x.size == 0:
        return 0.0
    with np.errstate(invalid="ignore", over="ignore"):
        d = np.abs(x.astype(np.float32) - y.astype(np.float32))
    same = (x == y) | (np.isnan(x) & np.isnan(y))
    d[same] = 0.0
    d[np.isnan(d)] = np.inf
    return float(d.max())


def diff_max(a: Checkpoint, b: Checkpoint) -> dict[str, float]:
    require_compat(a, b)
    out = {}
    for name in a:
        ra, rb = a[name], b[name]
        worst = 0.0
        for start, stop in ra.chunks():
            worst = max(worst, max_abs_diff(ra.rows_f32(start, stop), rb.rows_f32(start, stop)))
        out[name] = worst
    return out
