"""Merge strategies: layer swapping, soups, TIES, row sparsification, layer reversion.

Every strategy returns a lazy :class:`Checkpoint`: copied tensors reuse the
source record, computed tensors are produced row-chunk by row-chunk when
saved, so merging two large checkpoints never holds more than a chunk of
each input in memory (TIES, which needs a per-tensor top-k, works a whole
tensor at a time).
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .analysis import delta_row_mavs, expert_weight, row_mavs
from .checkpoint import Checkpoint, TensorRecord, max_abs_diff, require_compat
from .dtypes import encode
from .topology import DEFAULT_SCHEME, NamingScheme, ParamKind, layer_count

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Merge parameters are invalid for the given checkpoints."""


class LayerRole(enum.Enum):
    LANG = "LANG"
    TASK = "TASK"
    TRANSITION = "TRANSITION"


class NormRouting(enum.Enum):
    FOLLOW_LAYER = "follow_layer"
    AVERAGE = "average"


class NonLayerRouting(enum.Enum):
    AVERAGE = "average"
    FROM_TASK = "from_task"
    FROM_LANG = "from_lang"


@dataclass(frozen=True)
class SwapConfig:
    """Layer-swap geometry. Defaults: 5 bottom and 2 top layers, no transition zones."""

    bottom: int = 5
    top: int = 2
    lower_transition: int = 0
    upper_transition: int = 0
    alpha_task: float = 1.0
    alpha_lang: float = 1.0
    norm_routing: NormRouting = NormRouting.FOLLOW_LAYER
    non_layer_routing: NonLayerRouting = NonLayerRouting.AVERAGE

    def __post_init__(self):
        object.__setattr__(self, "norm_routing", NormRouting(self.norm_routing))
        object.__setattr__(self, "non_layer_routing", NonLayerRouting(self.non_layer_routing))
        for key in ("bottom", "top", "lower_transition", "upper_transition"):
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ConfigError(f"{key} must be a non-negative integer, got {value!r}")
        if not (self.alpha_task >= 0 and self.alpha_lang >= 0):
            raise ConfigError("alpha_task and alpha_lang must be non-negative")
        if not self.alpha_task + self.alpha_lang > 0:
            raise ConfigError("alpha_task + alpha_lang must be positive")

    @property
    def span(self) -> int:
        return self.bottom + self.lower_transition + self.top + self.upper_transition

    def check(self, n_layers: int) -> None:
        if self.span > n_layers:
            raise ConfigError(
                f"bottom + lower_transition + top + upper_transition = {self.span} exceeds {n_layers} layers"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["norm_routing"] = self.norm_routing.value
        d["non_layer_routing"] = self.non_layer_routing.value
        return d


def assign_layers(cfg: SwapConfig, n_layers: int) -> dict[int, LayerRole]:
    """Role of every layer: outer layers from the language expert, a transition
    zone inside each swapped block, the task expert in the middle.

    A layer is TASK only when it clears *both* transition zones
    (``bottom + lower_transition <= l <= L - 1 - top - upper_transition``).
    """
    cfg.check(n_layers)
    roles = {}
    for layer in range(n_layers):
        if layer < cfg.bottom or layer > n_layers - 1 - cfg.top:
            roles[layer] = LayerRole.LANG
        elif cfg.bottom + cfg.lower_transition <= layer <= n_layers - 1 - cfg.top - cfg.upper_transition:
            roles[layer] = LayerRole.TASK
        else:
            roles[layer] = LayerRole.TRANSITION
    return roles


def layers_with(roles: dict[int, LayerRole], role: LayerRole) -> list[int]:
    return [layer for layer, r in roles.items() if r is role]


# ---------------------------------------------------------------------------
# weighted averaging


def normalize_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ConfigError(f"got {w.size} weights for {n} checkpoints")
    if not np.all(w >= 0):
        raise ConfigError("weights must be non-negative")
    total = w.sum()
    if not total > 0:
        raise ConfigError("weights sum to zero")
    return w / total


def weighted_rows(records: list[TensorRecord], weights: np.ndarray, start: int, stop: int) -> bytes:
    """Weighted mean of rows ``[start, stop)`` encoded in the records' dtype.

    Terms are accumulated in float64 in a fixed order (descending weight,
    ties by position) and rounded once to float32, so averaging identical
    inputs reproduces them exactly and reordering inputs does not change the
    result.
    """
    order = sorted(range(len(records)), key=lambda i: -weights[i])
    acc = None
    for i in order:
        if weights[i] == 0:
            continue
        term = records[i].rows_f32(start, stop).astype(np.float64)
        term *= weights[i]
        if acc is None:
            acc = term
        else:
            acc += term
    return encode(acc.astype(np.float32), records[0].dtype)


def averaged_record(name: str, records: list[TensorRecord], weights: np.ndarray) -> TensorRecord:
    first = records[0]
    return TensorRecord(name, first.dtype, first.shape, lambda a, b: weighted_rows(records, weights, a, b))


# ---------------------------------------------------------------------------
# layer swapping


@dataclass(frozen=True)
class PlanEntry:
    label: str  # TASK | LANG | TRANSITION_AVG | NON_LAYER
    record: TensorRecord


def swap_plan(task: Checkpoint, lang: Checkpoint, cfg: SwapConfig, scheme: NamingScheme = DEFAULT_SCHEME):
    """Per tensor: where its merged value comes from, and a record producing it."""
    require_compat(task, lang)
    n_layers = layer_count(task, scheme)
    roles = assign_layers(cfg, n_layers)
    pair = np.array([cfg.alpha_task, cfg.alpha_lang], dtype=np.float64)
    pair /= pair.sum()

    plan = {}
    for name in task:
        loc = scheme.classify(name)
        t, g = task[name], lang[name]
        if loc.kind is ParamKind.NON_LAYER:
            route = cfg.non_layer_routing
            if route is NonLayerRouting.FROM_TASK:
                rec = t
            elif route is NonLayerRouting.FROM_LANG:
                rec = g
            else:
                rec = averaged_record(name, [t, g], pair)
            plan[name] = PlanEntry("NON_LAYER", rec)
            continue
        role = roles[loc.layer]
        if loc.kind is ParamKind.LAYER_NORM and cfg.norm_routing is NormRouting.AVERAGE:
            role = LayerRole.TRANSITION
        if role is LayerRole.LANG:
            plan[name] = PlanEntry("LANG", g)
        elif role is LayerRole.TASK:
            plan[name] = PlanEntry("TASK", t)
        else:
            plan[name] = PlanEntry("TRANSITION_AVG", averaged_record(name, [t, g], pair))
    return roles, plan


def layer_swap(task: Checkpoint, lang: Checkpoint, cfg: SwapConfig = SwapConfig(), scheme: NamingScheme = DEFAULT_SCHEME) -> Checkpoint:
    roles, plan = swap_plan(task, lang, cfg, scheme)
    if cfg.bottom == 0 and cfg.top == 0:
        log.warning("bottom = top = 0: no layers are swapped in from the language expert")
    return Checkpoint([entry.record.renamed(name) for name, entry in plan.items()], metadata=task.metadata)


def magnitude_alphas(base: Checkpoint, task: Checkpoint, lang: Checkpoint, scheme: NamingScheme = DEFAULT_SCHEME) -> tuple[float, float]:
    """Magnitude-adjusted (alpha_task, alpha_lang): inverse mean row MAV of each expert."""
    return (
        expert_weight(delta_row_mavs(base, task, scheme)),
        expert_weight(delta_row_mavs(base, lang, scheme)),
    )


# ---------------------------------------------------------------------------
# soups


def soup(experts: list[Checkpoint], weights=None) -> Checkpoint:
    """Elementwise weighted mean of same-shaped checkpoints (uniform by default)."""
    if len(experts) < 2:
        raise ConfigError("a soup needs at least two checkpoints")
    require_compat(*experts)
    w = normalize_weights(weights, len(experts))
    first = experts[0]
    return Checkpoint(
        [averaged_record(name, [e[name] for e in experts], w) for name in first],
        metadata=first.metadata,
    )


def mav_weights(pre: Checkpoint, experts: list[Checkpoint], scheme: NamingScheme = DEFAULT_SCHEME) -> np.ndarray:
    """Normalised inverse-mean-MAV weights of each expert relative to ``pre``."""
    raw = [expert_weight(delta_row_mavs(pre, e, scheme)) for e in experts]
    return normalize_weights(raw, len(experts))


def mav_weighted_soup(pre: Checkpoint, experts: list[Checkpoint], scheme: NamingScheme = DEFAULT_SCHEME) -> Checkpoint:
    require_compat(pre, *experts)
    return soup(experts, mav_weights(pre, experts, scheme))


# ---------------------------------------------------------------------------
# TIES


@dataclass(frozen=True)
class TiesConfig:
    density: float = 0.2
    lam: float = 1.0

    def __post_init__(self):
        if not 0 < self.density <= 1:
            raise ConfigError(f"density must lie in (0, 1], got {self.density}")
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")


def keep_count(density: float, numel: int) -> int:
    # round away float noise such as 0.7 * 10 = 7.000000000000001
    return min(numel, math.ceil(round(density * numel, 9)))


def ties_arrays(pre: np.ndarray, experts: list[np.ndarray], cfg: TiesConfig) -> np.ndarray:
    """Trim, elect sign, disjoint mean and rescale, all in float32, on flat arrays."""
    pre = pre.astype(np.float32, copy=False).ravel()
    k = keep_count(cfg.density, pre.size)
    trimmed = []
    for x in experts:
        tv = x.astype(np.float32, copy=False).ravel() - pre
        keep = np.argsort(-np.abs(tv), kind="stable")[:k]
        t = np.zeros_like(tv)
        t[keep] = tv[keep]
        trimmed.append(t)

    total = np.zeros_like(pre)
    for t in trimmed:
        total = total + t
    elected = np.sign(total)

    agree_sum = np.zeros_like(pre)
    agree_count = np.zeros_like(pre)
    for t in trimmed:
        agree = (np.sign(t) == elected) & (elected != 0)
        agree_sum = agree_sum + np.where(agree, t, np.float32(0))
        agree_count = agree_count + agree.astype(np.float32)
    with np.errstate(invalid="ignore", divide="ignore"):
        merged = np.where(agree_count > 0, agree_sum / agree_count, np.float32(0))
    update = np.float32(cfg.lam) * merged
    return np.where(update != 0, pre + update, pre)


def ties_merge(pre: Checkpoint, experts: list[Checkpoint], cfg: TiesConfig = TiesConfig()) -> Checkpoint:
    if not experts:
        raise ConfigError("TIES needs at least one expert")
    require_compat(pre, *experts)

    def record(name):
        base = pre[name]
        sources = [e[name] for e in experts]

        def read(a, b):
            merged = ties_arrays(base.to_f32(), [s.to_f32() for s in sources], cfg)
            row = math.prod(base.row_shape)
            return encode(merged[a * row : b * row], base.dtype)

        return TensorRecord(name, base.dtype, base.shape, read, chunkable=False)

    return Checkpoint([record(name) for name in pre], metadata=pre.metadata)


# ---------------------------------------------------------------------------
# sparsification and reversion


@dataclass
class SparsifyStats:
    threshold: float
    kept: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    def kept_fraction(self, name: str) -> float:
        mask = self.kept[name]
        return float(mask.mean()) if mask.size else 0.0

    @property
    def kept_rows(self) -> int:
        return int(sum(m.sum() for m in self.kept.values()))

    @property
    def total_rows(self) -> int:
        return sum(m.size for m in self.kept.values())

    @property
    def overall(self) -> float:
        return self.kept_rows / self.total_rows if self.total_rows else 0.0


def _select_rows(name, ft: TensorRecord, pre: TensorRecord, mask: np.ndarray) -> TensorRecord:
    def read(a, b):
        keep = mask[a:b, None]
        new = np.frombuffer(ft.read_rows(a, b), dtype=np.uint8).reshape(b - a, ft.row_nbytes)
        old = np.frombuffer(pre.read_rows(a, b), dtype=np.uint8).reshape(b - a, ft.row_nbytes)
        return np.where(keep, new, old).tobytes()

    return TensorRecord(name, ft.dtype, ft.shape, read)


def sparsify_rows(pre: Checkpoint, ft: Checkpoint, threshold: float, scheme: NamingScheme = DEFAULT_SCHEME):
    """Keep a row's fine-tuned values only when its delta MAV exceeds ``threshold``.

    Returns the sparsified checkpoint and per-tensor kept-row masks.
    """
    if not threshold >= 0:
        raise ConfigError(f"threshold must be >= 0, got {threshold}")
    require_compat(pre, ft)
    with np.errstate(over="ignore"):
        tau = np.float32(threshold)
    stats = SparsifyStats(float(threshold))
    out = []
    for name in ft:
        f, p = ft[name], pre[name]
        if f.rank not in (1, 2):
            stats.skipped.append(name)
            out.append(f)
            continue
        mavs = np.concatenate([row_mavs(p.rows_f32(a, b), f.rows_f32(a, b)) for a, b in p.chunks()])
        mask = mavs > tau
        stats.kept[name] = mask
        out.append(_select_rows(name, f, p, mask))
    return Checkpoint(out, metadata=ft.metadata), stats


def parse_layer_set(text: str) -> set[int]:
    """``"0-4,30-31"`` -> {0, 1, 2, 3, 4, 30, 31}."""
    layers: set[int] = set()
    for part in filter(None, (p.strip() for p in str(text).split(","))):
        lo, sep, hi = part.partition("-")
        try:
            a = int(lo)
            b = int(hi) if sep else a
        except ValueError:
            raise ConfigError(f"bad layer range {part!r}") from None
        if a < 0 or b < a:
            raise ConfigError(f"bad layer range {part!r}")
        layers.update(range(a, b + 1))
    return layers


def format_layer_set(layers) -> str:
    runs = []
    for layer in sorted(layers):
        if runs and layer == runs[-1][1] + 1:
            runs[-1][1] = layer
        else:
            runs.append([layer, layer])
    return ",".join(str(a) if a == b else f"{a}-{b}" for a, b in runs)


def revert_layers(ft: Checkpoint, pre: Checkpoint, layers, scheme: NamingScheme = DEFAULT_SCHEME) -> Checkpoint:
    """Restore every tensor of the given transformer layers (norms included) from ``pre``."""
    require_compat(ft, pre)
    layers = parse_layer_set(layers) if isinstance(layers, str) else set(layers)
    n_layers = layer_count(ft, scheme)
    bad = sorted(x for x in layers if not 0 <= x < n_layers)
    if bad:
        raise ConfigError(f"layers {bad} outside 0..{n_layers - 1}")
    out = []
    for name in ft:
        loc = scheme.classify(name)
        src = pre if loc.layer is not None and loc.layer in layers else ft
        out.append(src[name])
    return Checkpoint(out, metadata=ft.metadata)


# ---------------------------------------------------------------------------
# provenance


@dataclass
class ProvenanceEntry:
    label: str
    deviation: float


@dataclass
class ProvenanceReport:
    entries: dict[str, ProvenanceEntry]

    @property
    def deviating(self) -> list[str]:
        return [name for name, e in self.entries.items() if e.deviation != 0]

    @property
    def ok(self) -> bool:
        return not self.deviating


def provenance(merged: Checkpoint, task: Checkpoint, lang: Checkpoint, cfg: SwapConfig = SwapConfig(), scheme: NamingScheme = DEFAULT_SCHEME) -> ProvenanceReport:
    """Check every tensor of ``merged`` against the value ``cfg`` says it should hold."""
    require_compat(merged, task, lang)
    _, plan = swap_plan(task, lang, cfg, scheme)
    entries = {}
    for name, entry in plan.items():
        got = merged[name]
        worst = 0.0
        for a, b in got.chunks():
            worst = max(worst, max_abs_diff(got.rows_f32(a, b), entry.record.rows_f32(a, b)))
        entries[name] = ProvenanceEntry(entry.label, worst)
    return ProvenanceReport(entries)
