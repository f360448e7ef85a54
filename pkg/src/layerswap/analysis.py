"""Row-level magnitude statistics of fine-tuning deltas and heatmap exports."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, TensorRecord, atomic_write_text, require_compat
from .topology import DEFAULT_SCHEME, GRID_KINDS, GRID_LABELS, NamingScheme, ParamKind, ParamLocus

log = logging.getLogger(__name__)

# thresholds used for the language and math expert heatmaps respectively
PRESET_THRESHOLDS = {"lang": 1.9e-5, "math": 1.0e-5}


class UndefinedWeightError(ValueError):
    pass


def row_mavs(pre_rows: np.ndarray, ft_rows: np.ndarray) -> np.ndarray:
    """Mean |ft - pre| over each row; the difference is taken in float32."""
    delta = np.abs(ft_rows.astype(np.float32) - pre_rows.astype(np.float32))
    delta = delta.reshape(delta.shape[0], -1)
    if delta.shape[1] == 0:
        return np.zeros(delta.shape[0], dtype=np.float32)
    return delta.mean(axis=1, dtype=np.float64).astype(np.float32)


def record_row_mavs(pre: TensorRecord, ft: TensorRecord) -> np.ndarray:
    return np.concatenate([row_mavs(pre.rows_f32(a, b), ft.rows_f32(a, b)) for a, b in pre.chunks()])


@dataclass
class RowMavs:
    name: str
    locus: ParamLocus
    values: np.ndarray
    rank: int


@dataclass
class DeltaStats:
    tensors: dict[str, RowMavs]
    skipped: list[str] = field(default_factory=list)

    @property
    def total_rows(self) -> int:
        return sum(t.values.size for t in self.tensors.values())

    @property
    def aggregate(self) -> float:
        """Mean MAV over every row of every analysed tensor."""
        rows = self.total_rows
        if rows == 0:
            return 0.0
        return float(sum(t.values.sum(dtype=np.float64) for t in self.tensors.values()) / rows)

    def all_values(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([t.values for t in self.tensors.values()])


def delta_row_mavs(pre: Checkpoint, ft: Checkpoint, scheme: NamingScheme = DEFAULT_SCHEME) -> DeltaStats:
    """Row MAVs of ``ft - pre`` for every rank-1 and rank-2 tensor."""
    require_compat(pre, ft)
    stats = DeltaStats({})
    for name in pre:
        rec = pre[name]
        if rec.rank not in (1, 2):
            stats.skipped.append(name)
            continue
        stats.tensors[name] = RowMavs(name, scheme.classify(name), record_row_mavs(rec, ft[name]), rec.rank)
    if stats.skipped:
        log.warning("skipped %d tensors that are not 1-D or 2-D: %s", len(stats.skipped), stats.skipped)
    return stats


def expert_weight(stats: DeltaStats) -> float:
    """Inverse of the mean row MAV; the souping weight of one expert."""
    agg = stats.aggregate
    if not agg > 0:
        raise UndefinedWeightError("expert is identical to the base checkpoint; its MAV weight is undefined")
    return 1.0 / agg


def percentile_threshold(stats: DeltaStats, percentile: float) -> np.float32:
    if not 0 <= percentile <= 100:
        raise ValueError(f"percentile {percentile} outside [0, 100]")
    values = stats.all_values()
    if values.size == 0:
        raise ValueError("no rows to take a percentile of")
    return np.float32(np.percentile(values, percentile))


# ---------------------------------------------------------------------------
# heatmap grid


@dataclass
class HeatmapGrid:
    n_layers: int
    threshold: float
    cells: dict[tuple[int, ParamKind], float]
    missing: list[tuple[int, ParamKind]] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, HeatmapGrid):
            return NotImplemented
        return (
            self.n_layers == other.n_layers
            and self.threshold == other.threshold
            and self.cells == other.cells
            and sorted(self.missing, key=_cell_key) == sorted(other.missing, key=_cell_key)
        )

    def matrix(self) -> np.ndarray:
        """(layers, 7) fractions, row 0 = bottom layer; missing cells are NaN."""
        out = np.full((self.n_layers, len(GRID_KINDS)), np.nan)
        for (layer, kind), frac in self.cells.items():
            out[layer, GRID_KINDS.index(kind)] = frac
        return out


def _cell_key(cell):
    return cell[0], GRID_KINDS.index(cell[1])


def heatmap(stats: DeltaStats, threshold: float, n_layers: int) -> HeatmapGrid:
    """Fraction of rows with MAV strictly above ``threshold`` per (layer, kind) cell."""
    if not threshold >= 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    tau = np.float32(threshold)
    above: dict[tuple[int, ParamKind], int] = {}
    rows: dict[tuple[int, ParamKind], int] = {}
    for t in stats.tensors.values():
        if t.rank != 2 or t.locus.kind not in GRID_KINDS or t.locus.layer >= n_layers:
            continue
        cell = (t.locus.layer, t.locus.kind)
        above[cell] = above.get(cell, 0) + int(np.count_nonzero(t.values > tau))
        rows[cell] = rows.get(cell, 0) + t.values.size
    cells = {}
    missing = []
    for layer in range(n_layers):
        for kind in GRID_KINDS:
            cell = (layer, kind)
            if cell not in rows:
                missing.append(cell)
            else:
                cells[cell] = above[cell] / rows[cell] if rows[cell] else 0.0
    return HeatmapGrid(n_layers, float(tau), cells, missing)


def heatmap_csv(grid: HeatmapGrid) -> str:
    lines = ["layer," + ",".join(GRID_LABELS)]
    for layer in reversed(range(grid.n_layers)):
        fields = [str(layer)]
        for kind in GRID_KINDS:
            frac = grid.cells.get((layer, kind))
            fields.append("" if frac is None else f"{frac:.6f}")
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def heatmap_json(grid: HeatmapGrid) -> str:
    doc = {
        "L": grid.n_layers,
        "threshold": grid.threshold,
        "cells": [
            {"layer": layer, "kind": kind.value, "fraction": grid.cells[(layer, kind)]}
            for layer, kind in sorted(grid.cells, key=_cell_key)
        ],
        "missing": [{"layer": layer, "kind": kind.value} for layer, kind in sorted(grid.missing, key=_cell_key)],
    }
    return json.dumps(doc, indent=1) + "\n"


def heatmap_from_json(text: str) -> HeatmapGrid:
    doc = json.loads(text)
    return HeatmapGrid(
        n_layers=int(doc["L"]),
        threshold=float(doc["threshold"]),
        cells={(int(c["layer"]), ParamKind(c["kind"])): float(c["fraction"]) for c in doc["cells"]},
        missing=[(int(c["layer"]), ParamKind(c["kind"])) for c in doc.get("missing", [])],
    )


_LIGHT = np.array([247, 252, 245])
_DARK = np.array([0, 68, 27])


def fill_color(fraction: float) -> str:
    """Linear near-white to dark-green ramp; darker means a larger fraction."""
    f = min(max(float(fraction), 0.0), 1.0)
    r, g, b = np.rint(_LIGHT + (_DARK - _LIGHT) * f).astype(int)
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(grid: HeatmapGrid, cell: int = 18, title: str | None = None) -> str:
    left, top = 34, 28 if title else 10
    width = left + cell * len(GRID_KINDS) + 10
    height = top + cell * grid.n_layers + 24
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="9">'
    ]
    if title:
        out.append(f'<text x="{left}" y="16" font-size="11">{_escape(title)}</text>')
    for layer in range(grid.n_layers):
        y = top + cell * (grid.n_layers - 1 - layer)
        out.append(f'<text x="{left - 4}" y="{y + cell * 0.7:.1f}" text-anchor="end">{layer}</text>')
        for col, kind in enumerate(GRID_KINDS):
            x = left + cell * col
            frac = grid.cells.get((layer, kind))
            if frac is None:
                out.append(
                    f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="#d9d9d9" '
                    f'stroke="#999999" stroke-dasharray="2,2" data-missing="1"/>'
                )
            else:
                out.append(
                    f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill_color(frac)}" '
                    f'stroke="#ffffff" data-layer="{layer}" data-kind="{kind.value}" data-fraction="{frac:.6f}"/>'
                )
    base = top + cell * grid.n_layers + 14
    for col, label in enumerate(GRID_LABELS):
        out.append(f'<text x="{left + cell * col + cell / 2:.1f}" y="{base}" text-anchor="middle">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


EXPORTERS = {"csv": heatmap_csv, "json": heatmap_json, "svg": heatmap_svg}


def export_heatmap(grid: HeatmapGrid, fmt: str, path: str | os.PathLike) -> None:
    try:
        render = EXPORTERS[fmt.lower()]
    except KeyError:
        raise ValueError(f"unknown heatmap format {fmt!r}; expected csv, json or svg") from None
    atomic_write_text(path, render(grid))
