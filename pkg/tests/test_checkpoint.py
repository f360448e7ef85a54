import json
import os
import struct
import tracemalloc

import numpy as np
import pytest
import safetensors.numpy
from hypothesis import given, settings
from hypothesis import strategies as st

from layerswap.checkpoint import (
    Checkpoint,
    CheckpointFormatError,
    CompatibilityError,
    TensorRecord,
    diff_max,
    load_checkpoint,
    save_checkpoint,
    validate_compat,
)
from layerswap.dtypes import DType

from oracles import max_abs_diff_loop


def write_raw(path, header: dict, data: bytes, pad=True):
    blob = json.dumps(header).encode()
    if pad:
        blob += b" " * (-len(blob) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)) + blob + data)


def random_checkpoint(rng, n=10, with_nan=False) -> Checkpoint:
    records = []
    for i in range(n):
        dtype = list(DType)[rng.integers(3)]
        rank = int(rng.integers(0, 3))
        shape = tuple(int(s) for s in rng.integers(0, 6, size=rank))
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = bytearray(rng.bytes(nbytes))
        if with_nan and dtype is DType.BFLOAT16 and nbytes:
            data[0:2] = struct.pack("<H", 0x7FC0)
        records.append(TensorRecord(f"t{i:02d}.{rng.integers(1000)}", dtype, shape, bytes(data)))
    return Checkpoint(records, metadata={"seed": "x"})


class TestLoad:
    def test_single_tensor(self, tmp_path):
        p = tmp_path / "a.st"
        write_raw(p, {"a": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}}, np.arange(1, 5, dtype="<f4").tobytes())
        ck = load_checkpoint(p)
        assert ck.index() == {"a": (DType.FLOAT32, (2, 2))}
        np.testing.assert_array_equal(ck["a"].to_f32(), [[1, 2], [3, 4]])

    def test_empty(self, tmp_path):
        p = tmp_path / "e.st"
        write_raw(p, {}, b"")
        assert len(load_checkpoint(p)) == 0

    def test_reads_file_written_by_safetensors(self, tmp_path):
        p = str(tmp_path / "ref.st")
        arrays = {"w": np.arange(12, dtype=np.float32).reshape(3, 4), "b": np.ones(5, dtype=np.float16)}
        safetensors.numpy.save_file(arrays, p, metadata={"k": "v"})
        ck = load_checkpoint(p)
        assert ck.metadata == {"k": "v"}
        np.testing.assert_array_equal(ck["w"].to_f32(), arrays["w"])
        np.testing.assert_array_equal(ck["b"].to_f32(), arrays["b"])

    @pytest.mark.parametrize(
        "header, data, match",
        [
            ({"a": {"dtype": "I64", "shape": [1], "data_offsets": [0, 8]}}, bytes(8), "unknown dtype"),
            ({"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, bytes(4), "beyond data buffer"),
            ({"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 4]}}, bytes(8), "expected 8"),
            ({"a": {"dtype": "F32", "shape": [2], "data_offsets": [4, 0]}}, bytes(8), "out of order"),
            (
                {
                    "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
                    "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
                },
                bytes(12),
                "overlap",
            ),
            ({"a": {"dtype": "F32", "shape": [-1], "data_offsets": [0, 0]}}, b"", "invalid shape"),
            ({"a": {"dtype": "F32"}}, b"", "lacks"),
        ],
    )
    def test_rejects_malformed(self, tmp_path, header, data, match):
        p = tmp_path / "bad.st"
        write_raw(p, header, data)
        with pytest.raises(CheckpointFormatError, match=match):
            load_checkpoint(p)

    def test_rejects_bad_json(self, tmp_path):
        p = tmp_path / "bad.st"
        with open(p, "wb") as fh:
            fh.write(struct.pack("<Q", 5) + b"{nope")
        with pytest.raises(CheckpointFormatError, match="malformed header"):
            load_checkpoint(p)

    def test_rejects_truncated_prefix(self, tmp_path):
        p = tmp_path / "bad.st"
        p.write_bytes(b"\x01\x02")
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_checkpoint(p)

    def test_rejects_header_longer_than_file(self, tmp_path):
        p = tmp_path / "bad.st"
        p.write_bytes(struct.pack("<Q", 1000) + b"{}")
        with pytest.raises(CheckpointFormatError, match="exceeds file size"):
            load_checkpoint(p)

    def test_lazy_reads_only_the_requested_tensor(self, tmp_path):
        big = 4 << 20
        ck = Checkpoint.from_arrays({f"t{i}": np.zeros(big // 4, dtype=np.float32) for i in range(6)})
        p = tmp_path / "lazy.st"
        save_checkpoint(ck, p)
        tracemalloc.start()
        try:
            loaded = load_checkpoint(p)
            after_open = tracemalloc.get_traced_memory()[0]
            payload = loaded["t3"].data
            peak = tracemalloc.get_traced_memory()[1]
        finally:
            tracemalloc.stop()
        assert len(payload) == big
        assert after_open < 64 << 10
        assert peak < big + (256 << 10)


class TestSave:
    def test_round_trip_is_byte_identical(self, tmp_path, rng):
        ck = random_checkpoint(rng)
        p1, p2 = tmp_path / "1.st", tmp_path / "2.st"
        save_checkpoint(ck, p1)
        back = load_checkpoint(p1)
        assert back.index() == ck.index()
        assert back.metadata == ck.metadata
        for name in ck:
            assert back[name].data == ck[name].data
        save_checkpoint(back, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_deterministic_and_threads_agree(self, tmp_path, rng):
        ck = random_checkpoint(rng, n=25)
        save_checkpoint(ck, tmp_path / "a.st")
        save_checkpoint(ck, tmp_path / "b.st")
        save_checkpoint(ck, tmp_path / "c.st", threads=4)
        assert (tmp_path / "a.st").read_bytes() == (tmp_path / "b.st").read_bytes() == (tmp_path / "c.st").read_bytes()

    def test_bf16_nan_bits_survive(self, tmp_path):
        data = struct.pack("<HH", 0x7FC0, 0x3F80)
        ck = Checkpoint([TensorRecord("n", DType.BFLOAT16, [2], data)])
        save_checkpoint(ck, tmp_path / "n.st")
        assert load_checkpoint(tmp_path / "n.st")["n"].data == data

    def test_header_is_sorted_and_aligned(self, tmp_path):
        ck = Checkpoint.from_arrays({"z": np.ones(2), "a": np.zeros(3)}, metadata={"b": "1", "a": "2"})
        p = tmp_path / "h.st"
        save_checkpoint(ck, p)
        blob = p.read_bytes()
        (n,) = struct.unpack("<Q", blob[:8])
        assert n % 8 == 0
        header = json.loads(blob[8 : 8 + n])
        assert list(header) == ["__metadata__", "a", "z"]
        assert header["a"]["data_offsets"] == [0, 12]

    def test_output_readable_by_safetensors(self, tmp_path):
        ck = Checkpoint.from_arrays({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, DType.FLOAT16)
        p = str(tmp_path / "o.st")
        save_checkpoint(ck, p)
        np.testing.assert_array_equal(safetensors.numpy.load_file(p)["w"], np.arange(6).reshape(2, 3))

    def test_inconsistent_buffer_rejected(self):
        with pytest.raises(ValueError, match="needs 16"):
            TensorRecord("x", DType.FLOAT32, [2, 2], bytes(12))

    def test_failed_write_leaves_no_file(self, tmp_path):
        def boom(a, b):
            raise RuntimeError("interrupted")

        ck = Checkpoint([TensorRecord("x", DType.FLOAT32, [4], boom)])
        target = tmp_path / "out.st"
        target.write_bytes(b"previous")
        with pytest.raises(RuntimeError):
            save_checkpoint(ck, target)
        assert target.read_bytes() == b"previous"
        assert os.listdir(tmp_path) == ["out.st"]


class TestCompare:
    def test_compat_ok(self, tiny):
        assert validate_compat(tiny["pre"], tiny["task"]).ok

    def test_missing_tensor(self):
        a = Checkpoint.from_arrays({"x": np.ones(2), "y": np.ones(2)})
        b = Checkpoint.from_arrays({"y": np.ones(2)})
        report = validate_compat(a, b)
        assert not report.ok
        assert report.missing_in_b == ["x"]
        assert report.missing_in_a == []

    def test_shape_mismatch(self):
        a = Checkpoint.from_arrays({"x": np.ones((4, 4))})
        b = Checkpoint.from_arrays({"x": np.ones((4, 8))})
        assert validate_compat(a, b).mismatched == [("x", "F32[4, 4]", "F32[4, 8]")]

    def test_dtype_mismatch_is_incompatible(self):
        a = Checkpoint.from_arrays({"x": np.ones(2)}, DType.FLOAT32)
        b = Checkpoint.from_arrays({"x": np.ones(2)}, DType.BFLOAT16)
        assert not validate_compat(a, b).ok
        with pytest.raises(CompatibilityError):
            diff_max(a, b)

    def test_diff_max_simple(self):
        a = Checkpoint.from_arrays({"t": np.array([1.0])})
        b = Checkpoint.from_arrays({"t": np.array([5.0])})
        assert diff_max(a, b) == {"t": 4.0}
        a = Checkpoint.from_arrays({"t": np.array([[1.0, 2.0]])})
        b = Checkpoint.from_arrays({"t": np.array([[1.0, 5.0]])})
        assert diff_max(a, b) == {"t": 3.0}

    def test_diff_max_self_is_zero(self, tiny):
        assert set(diff_max(tiny["task"], tiny["task"]).values()) == {0.0}

    def test_diff_max_matches_loop_and_is_symmetric(self, tiny):
        d = diff_max(tiny["pre"], tiny["lang"])
        assert d == diff_max(tiny["lang"], tiny["pre"])
        for name in d:
            assert d[name] == max_abs_diff_loop(tiny["pre"][name].to_f32(), tiny["lang"][name].to_f32())

    def test_diff_max_nan_handling(self):
        a = Checkpoint.from_arrays({"t": np.array([np.nan, 1.0])})
        assert diff_max(a, a) == {"t": 0.0}
        b = Checkpoint.from_arrays({"t": np.array([0.0, 1.0])})
        assert diff_max(a, b) == {"t": float("inf")}


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_round_trip_property(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    ck = random_checkpoint(rng, n=int(rng.integers(0, 8)), with_nan=True)
    p = tmp_path_factory.mktemp("rt") / "x.st"
    save_checkpoint(ck, p)
    back = load_checkpoint(p)
    assert back.index() == ck.index()
    assert all(back[k].data == ck[k].data for k in ck)
