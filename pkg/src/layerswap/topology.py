"""Tensor-name classification into (layer index, parameter kind)."""
from __future__ import annotations

import enum
import json
import os
import re
from dataclasses import dataclass, field
from typing import Iterable

from .checkpoint import Checkpoint


class ParamKind(enum.Enum):
    ATTN_Q = "ATTN_Q"
    ATTN_K = "ATTN_K"
    ATTN_V = "ATTN_V"
    ATTN_O = "ATTN_O"
    FFN_W1 = "FFN_W1"
    FFN_W3 = "FFN_W3"
    FFN_W2 = "FFN_W2"
    LAYER_NORM = "LAYER_NORM"
    NON_LAYER = "NON_LAYER"


# heatmap column order: attention Q, K, V, O then feed-forward gate, up, down
GRID_KINDS = (
    ParamKind.ATTN_Q,
    ParamKind.ATTN_K,
    ParamKind.ATTN_V,
    ParamKind.ATTN_O,
    ParamKind.FFN_W1,
    ParamKind.FFN_W3,
    ParamKind.FFN_W2,
)
GRID_LABELS = ("Wq", "Wk", "Wv", "Wo", "W1", "W3", "W2")


class SchemeError(ValueError):
    pass


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class ParamLocus:
    kind: ParamKind
    layer: int | None = None

    def __post_init__(self):
        if (self.kind is ParamKind.NON_LAYER) != (self.layer is None):
            raise ValueError(f"{self.kind.name} locus with layer={self.layer}")


NON_LAYER = ParamLocus(ParamKind.NON_LAYER)


@dataclass(frozen=True)
class NamingScheme:
    """Ordered (pattern, kind) rules; first full match wins.

    A pattern is a regular expression matched against the whole name, with
    ``{layer}`` standing for the layer-index component.
    """

    rules: tuple[tuple[str, ParamKind], ...]
    _compiled: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        compiled = []
        for pattern, kind in self.rules:
            if kind is ParamKind.NON_LAYER:
                if "{layer}" in pattern:
                    raise SchemeError(f"NON_LAYER rule {pattern!r} must not capture a layer")
            elif pattern.count("{layer}") != 1:
                raise SchemeError(f"rule {pattern!r} for {kind.name} needs exactly one {{layer}} placeholder")
            try:
                rx = re.compile(pattern.replace("{layer}", r"(?P<layer>[^.]+)"))
            except re.error as exc:
                raise SchemeError(f"bad pattern {pattern!r}: {exc}") from None
            compiled.append((rx, kind))
        object.__setattr__(self, "_compiled", tuple(compiled))

    def classify(self, name: str) -> ParamLocus:
        for rx, kind in self._compiled:
            m = rx.fullmatch(name)
            if m is None:
                continue
            if kind is ParamKind.NON_LAYER:
                return NON_LAYER
            index = m.group("layer")
            if not (index.isascii() and index.isdigit()):
                raise SchemeError(f"{name!r} matched {rx.pattern!r} with non-numeric layer {index!r}")
            return ParamLocus(kind, int(index))
        return NON_LAYER

    def to_json(self) -> list[dict[str, str]]:
        return [{"pattern": p, "kind": k.value} for p, k in self.rules]

    @classmethod
    def from_json(cls, items) -> "NamingScheme":
        if not isinstance(items, list):
            raise SchemeError("scheme must be a JSON array of {pattern, kind} objects")
        rules = []
        for item in items:
            try:
                rules.append((str(item["pattern"]), ParamKind(item["kind"])))
            except (KeyError, TypeError, ValueError):
                raise SchemeError(f"invalid scheme entry {item!r}") from None
        return cls(tuple(rules))


_LLAMA = r"model\.layers\.{layer}\."
DEFAULT_SCHEME = NamingScheme(
    (
        (_LLAMA + r"self_attn\.q_proj\.(weight|bias)", ParamKind.ATTN_Q),
        (_LLAMA + r"self_attn\.k_proj\.(weight|bias)", ParamKind.ATTN_K),
        (_LLAMA + r"self_attn\.v_proj\.(weight|bias)", ParamKind.ATTN_V),
        (_LLAMA + r"self_attn\.o_proj\.(weight|bias)", ParamKind.ATTN_O),
        (_LLAMA + r"mlp\.gate_proj\.weight", ParamKind.FFN_W1),
        (_LLAMA + r"mlp\.up_proj\.weight", ParamKind.FFN_W3),
        (_LLAMA + r"mlp\.down_proj\.weight", ParamKind.FFN_W2),
        (_LLAMA + r"(input_layernorm|post_attention_layernorm)\.weight", ParamKind.LAYER_NORM),
    )
)

SCHEME_ENV = "LAYERSWAP_SCHEME"


def load_scheme(path: str | os.PathLike | None = None) -> NamingScheme:
    """Scheme from ``path``, else from $LAYERSWAP_SCHEME, else the built-in Llama scheme."""
    path = path or os.environ.get(SCHEME_ENV)
    if not path:
        return DEFAULT_SCHEME
    with open(path, encoding="utf-8") as fh:
        try:
            items = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemeError(f"{path}: {exc}") from None
    return NamingScheme.from_json(items)


def classify(name: str, scheme: NamingScheme = DEFAULT_SCHEME) -> ParamLocus:
    return scheme.classify(name)


def loci(ckpt: Checkpoint, scheme: NamingScheme = DEFAULT_SCHEME) -> dict[str, ParamLocus]:
    return {name: scheme.classify(name) for name in ckpt}


def layer_count_of(layers: Iterable[int]) -> int:
    seen = set(layers)
    if not seen:
        raise TopologyError("no tensor carries a layer index")
    count = max(seen) + 1
    gaps = sorted(set(range(count)) - seen)
    if gaps:
        raise TopologyError(f"layer indices have gaps: missing {gaps}")
    return count


def layer_count(ckpt: Checkpoint, scheme: NamingScheme = DEFAULT_SCHEME) -> int:
    return layer_count_of(loc.layer for loc in loci(ckpt, scheme).values() if loc.layer is not None)


@dataclass
class GridLayout:
    n_layers: int
    cells: list[tuple[int, ParamKind]]
    missing: list[tuple[int, ParamKind]]


def grid_cells(ckpt: Checkpoint, scheme: NamingScheme = DEFAULT_SCHEME) -> GridLayout:
    """Heatmap cells present among layered rank-2 tensors, bottom layer first."""
    n_layers = layer_count(ckpt, scheme)
    present = set()
    for name, loc in loci(ckpt, scheme).items():
        if loc.kind in GRID_KINDS and ckpt[name].rank == 2:
            present.add((loc.layer, loc.kind))
    order = [(layer, kind) for layer in range(n_layers) for kind in GRID_KINDS]
    return GridLayout(
        n_layers,
        cells=[c for c in order if c in present],
        missing=[c for c in order if c not in present],
    )
