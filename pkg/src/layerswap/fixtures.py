"""Deterministic synthetic Llama-style checkpoint triples (pre, task-like, lang-like).

Each tensor is generated independently from ``(seed, name, role)`` so a
fixture can be streamed to disk tensor by tensor. The deltas mimic the
patterns seen in real experts: the language-like expert changes attention in
the outermost layers and feed-forward only near the top, the task-like
expert changes the upper half of the model.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, TensorRecord
from .dtypes import DType, encode

ROLES = ("pre", "task", "lang")
DELTA_SCALE = 1e-3


@dataclass(frozen=True)
class FixtureShape:
    layers: int
    hidden: int
    attn_dim: int | None = None
    kv_dim: int | None = None
    ffn_dim: int | None = None
    vocab: int | None = None

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("fixture needs at least one layer and hidden size >= 1")

    @property
    def dims(self) -> dict[str, int]:
        h = self.hidden
        return {
            "attn": self.attn_dim or h,
            "kv": self.kv_dim or max(1, h // 2),
            "ffn": self.ffn_dim or 2 * h,
            "vocab": self.vocab or 4 * h,
        }

    def tensors(self) -> list[tuple[str, tuple[int, ...]]]:
        h, d = self.hidden, self.dims
        out = [
            ("model.embed_tokens.weight", (d["vocab"], h)),
            ("model.norm.weight", (h,)),
            ("lm_head.weight", (d["vocab"], h)),
        ]
        for i in range(self.layers):
            p = f"model.layers.{i}."
            out += [
                (p + "input_layernorm.weight", (h,)),
                (p + "post_attention_layernorm.weight", (h,)),
                (p + "self_attn.q_proj.weight", (d["attn"], h)),
                (p + "self_attn.k_proj.weight", (d["kv"], h)),
                (p + "self_attn.v_proj.weight", (d["kv"], h)),
                (p + "self_attn.o_proj.weight", (h, d["attn"])),
                (p + "mlp.gate_proj.weight", (d["ffn"], h)),
                (p + "mlp.up_proj.weight", (d["ffn"], h)),
                (p + "mlp.down_proj.weight", (h, d["ffn"])),
            ]
        return out


def _rng(seed: int, name: str, salt: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode()), salt])


def _row_update_prob(name: str, layers: int, role: str) -> float:
    """Fraction of rows an expert of ``role`` updates in tensor ``name``."""
    if not name.startswith("model.layers."):
        return 0.5
    layer = int(name.split(".")[2])
    depth = layer / max(1, layers - 1)
    attn = ".self_attn." in name
    if role == "lang":
        outer = layer < 2 or layer >= layers - 2
        if attn:
            return 0.9 if outer else 0.15
        return 0.8 if layer >= layers - 2 else 0.05
    # task-like: bottom half mostly untouched, upper half changes broadly
    if depth < 0.5:
        return 0.05
    return 0.85 if attn else 0.6


def _pre_values(seed: int, name: str, shape) -> np.ndarray:
    rng = _rng(seed, name, 0)
    if len(shape) == 1:
        return (1.0 + 0.05 * rng.standard_normal(shape, dtype=np.float32)).astype(np.float32)
    return rng.standard_normal(shape, dtype=np.float32) * np.float32(0.02)


def _expert_values(seed: int, name: str, shape, layers: int, role: str) -> np.ndarray:
    pre = _pre_values(seed, name, shape)
    rng = _rng(seed, name, ROLES.index(role))
    rows = shape[0] if len(shape) == 2 else 1
    mask = rng.random(rows) < _row_update_prob(name, layers, role)
    scale = rng.uniform(0.5, 2.0, size=rows).astype(np.float32) * np.float32(DELTA_SCALE) * mask
    delta = rng.standard_normal(shape, dtype=np.float32)
    delta *= scale.reshape((rows,) + (1,) * (len(shape) - 1)) if len(shape) == 2 else scale[0]
    return pre + delta


def make_fixture(
    seed: int,
    shape: FixtureShape,
    dtype: DType = DType.FLOAT32,
    roles=ROLES,
) -> dict[str, Checkpoint]:
    """Lazy checkpoints keyed by role; payloads are generated when read."""
    out = {}
    for role in roles:
        if role not in ROLES:
            raise ValueError(f"unknown fixture role {role!r}")
        records = []
        for name, dims in shape.tensors():

            def read(a, b, name=name, dims=dims, role=role):
                if role == "pre":
                    values = _pre_values(seed, name, dims)
                else:
                    values = _expert_values(seed, name, dims, shape.layers, role)
                blob = encode(values, dtype)
                row = len(blob) // (dims[0] if len(dims) == 2 else 1)
                return blob[a * row : b * row]

            records.append(TensorRecord(name, dtype, dims, read, chunkable=False))
        out[role] = Checkpoint(
            records,
            metadata={"fixture_seed": str(seed), "fixture_role": role, "fixture_layers": str(shape.layers)},
        )
    return out
