import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from layerswap.checkpoint import Checkpoint, TensorRecord
from layerswap.dtypes import DType
from layerswap.fixtures import FixtureShape, make_fixture


def materialize(ckpt: Checkpoint) -> Checkpoint:
    """Eager in-memory copy of a lazy checkpoint."""
    return Checkpoint([TensorRecord(r.name, r.dtype, r.shape, r.data) for r in ckpt.values()], ckpt.metadata)


def fixture_triple(seed=0, layers=4, hidden=8, dtype=DType.FLOAT32):
    fx = make_fixture(seed, FixtureShape(layers, hidden), dtype)
    return {k: materialize(v) for k, v in fx.items()}


def distinct(ckpt: Checkpoint, offset: float = 1.0) -> Checkpoint:
    """Copy with every element shifted, so no tensor is bit-equal to the source."""
    return Checkpoint.from_arrays({k: v + offset for k, v in ckpt.to_arrays().items()}, ckpt[next(iter(ckpt))].dtype)


@pytest.fixture(scope="session")
def tiny():
    return fixture_triple(seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(acceptance.RESULTS, key=lambda l: int(l[8:10]) if l[6:8] == "AC" else 99):
        terminalreporter.write_line(line)
