"""Declarative merge recipes: parse, fill defaults, validate, execute."""
from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import merge
from .analysis import delta_row_mavs, percentile_threshold
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .merge import ConfigError, SwapConfig, TiesConfig
from .topology import load_scheme

log = logging.getLogger(__name__)

# role -> "one" | "many"; a trailing "?" marks an optional role
ROLES = {
    "layer_swap": {"task": "one", "lang": "one", "base?": "one"},
    "soup": {"experts": "many"},
    "mav_soup": {"base": "one", "experts": "many"},
    "ties": {"base": "one", "experts": "many"},
    "sparsify": {"base": "one", "ft": "one"},
    "revert_layers": {"base": "one", "ft": "one"},
}

_SWAP_DEFAULTS = {**SwapConfig().to_dict(), "alpha_mode": "fixed"}
DEFAULTS = {
    "layer_swap": _SWAP_DEFAULTS,
    "soup": {"weights": None},
    "mav_soup": {},
    "ties": {"density": TiesConfig().density, "lam": TiesConfig().lam},
    "sparsify": {"threshold": None, "percentile": None},
    "revert_layers": {"layers": None},
}


@dataclass
class MergeRecipe:
    strategy: str
    inputs: dict
    output: str
    params: dict = field(default_factory=dict)
    scheme: str | None = None

    def to_dict(self) -> dict:
        d = {"strategy": self.strategy, "inputs": self.inputs, "params": self.params, "output": self.output}
        if self.scheme is not None:
            d["scheme"] = self.scheme
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc) -> "MergeRecipe":
        if not isinstance(doc, dict):
            raise ConfigError("recipe must be a JSON object")
        unknown = set(doc) - {"strategy", "inputs", "params", "output", "scheme"}
        if unknown:
            raise ConfigError(f"unknown recipe keys {sorted(unknown)}")
        try:
            return cls(
                strategy=doc["strategy"],
                inputs=dict(doc["inputs"]),
                output=doc["output"],
                params=dict(doc.get("params") or {}),
                scheme=doc.get("scheme"),
            )
        except KeyError as exc:
            raise ConfigError(f"recipe lacks required key {exc}") from None

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MergeRecipe":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(doc)


def resolve(recipe: MergeRecipe) -> MergeRecipe:
    """Copy of ``recipe`` with every default filled in and the structure validated."""
    if recipe.strategy not in ROLES:
        raise ConfigError(f"unknown strategy {recipe.strategy!r}; expected one of {sorted(ROLES)}")
    roles = ROLES[recipe.strategy]
    inputs = {}
    for spec, arity in roles.items():
        role = spec.rstrip("?")
        value = recipe.inputs.get(role)
        if value is None:
            if not spec.endswith("?"):
                raise ConfigError(f"{recipe.strategy} needs input {role!r}")
            continue
        if arity == "many":
            if isinstance(value, str) or len(value) < (2 if recipe.strategy in ("soup", "mav_soup") else 1):
                raise ConfigError(f"{recipe.strategy} input {role!r} must list enough checkpoints")
            value = [str(v) for v in value]
        elif not isinstance(value, str):
            raise ConfigError(f"input {role!r} must be a single path")
        inputs[role] = value
    extra = set(recipe.inputs) - {s.rstrip("?") for s in roles}
    if extra:
        raise ConfigError(f"{recipe.strategy} does not take inputs {sorted(extra)}")

    defaults = DEFAULTS[recipe.strategy]
    unknown = set(recipe.params) - set(defaults)
    if unknown:
        raise ConfigError(f"{recipe.strategy} does not take params {sorted(unknown)}")
    params = {**copy.deepcopy(defaults), **recipe.params}

    if recipe.strategy == "layer_swap":
        if params["alpha_mode"] not in ("fixed", "magnitude"):
            raise ConfigError("alpha_mode must be 'fixed' or 'magnitude'")
        if params["alpha_mode"] == "magnitude" and "base" not in inputs:
            raise ConfigError("alpha_mode 'magnitude' needs a base checkpoint")
        _swap_config(params)
    elif recipe.strategy == "ties":
        TiesConfig(params["density"], params["lam"])
    elif recipe.strategy == "sparsify":
        if (params["threshold"] is None) == (params["percentile"] is None):
            raise ConfigError("sparsify needs exactly one of threshold or percentile")
    elif recipe.strategy == "revert_layers":
        layers = params["layers"]
        if layers is None:
            raise ConfigError("revert_layers needs params.layers")
        chosen = merge.parse_layer_set(layers) if isinstance(layers, str) else set(layers)
        params["layers"] = merge.format_layer_set(chosen)
    elif recipe.strategy == "soup" and params["weights"] is not None:
        merge.normalize_weights(params["weights"], len(inputs["experts"]))
    return MergeRecipe(recipe.strategy, inputs, recipe.output, params, recipe.scheme)


def _swap_config(params: dict) -> SwapConfig:
    fields = {k: v for k, v in params.items() if k != "alpha_mode"}
    try:
        return SwapConfig(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class RecipeResult:
    merged: Checkpoint
    info: dict


def build(recipe: MergeRecipe) -> RecipeResult:
    """Open inputs and assemble the (lazy) merged checkpoint for a resolved recipe."""
    scheme = load_scheme(recipe.scheme)
    p = recipe.params
    ins = {k: [load_checkpoint(x) for x in v] if isinstance(v, list) else load_checkpoint(v) for k, v in recipe.inputs.items()}
    info: dict = {}
    s = recipe.strategy
    if s == "layer_swap":
        cfg = _swap_config(p)
        if p["alpha_mode"] == "magnitude":
            a_task, a_lang = merge.magnitude_alphas(ins["base"], ins["task"], ins["lang"], scheme)
            cfg = SwapConfig(**{**cfg.to_dict(), "alpha_task": a_task, "alpha_lang": a_lang})
        roles, _ = merge.swap_plan(ins["task"], ins["lang"], cfg, scheme)
        merged = merge.layer_swap(ins["task"], ins["lang"], cfg, scheme)
        info = {"config": cfg.to_dict(), "roles": roles}
    elif s == "soup":
        weights = merge.normalize_weights(p["weights"], len(ins["experts"]))
        merged = merge.soup(ins["experts"], weights)
        info = {"weights": weights}
    elif s == "mav_soup":
        weights = merge.mav_weights(ins["base"], ins["experts"], scheme)
        merged = merge.soup(ins["experts"], weights)
        info = {"weights": weights}
    elif s == "ties":
        merged = merge.ties_merge(ins["base"], ins["experts"], TiesConfig(p["density"], p["lam"]))
    elif s == "sparsify":
        threshold = p["threshold"]
        if threshold is None:
            threshold = float(percentile_threshold(delta_row_mavs(ins["base"], ins["ft"], scheme), p["percentile"]))
        merged, stats = merge.sparsify_rows(ins["base"], ins["ft"], threshold, scheme)
        info = {"threshold": threshold, "stats": stats}
    else:
        merged = merge.revert_layers(ins["ft"], ins["base"], p["layers"], scheme)
        info = {"layers": p["layers"]}
    return RecipeResult(merged, info)


def run(recipe: MergeRecipe, threads: int = 1) -> RecipeResult:
    """Resolve, log, build and save; returns what was written."""
    resolved = resolve(recipe)
    log.info("resolved recipe", extra={"record": resolved.to_dict()})
    result = build(resolved)
    save_checkpoint(result.merged, resolved.output, threads=threads)
    log.info("wrote checkpoint", extra={"record": {"output": resolved.output, "tensors": len(result.merged)}})
    return result


def weights_line(weights: np.ndarray) -> str:
    return "normalized weights: " + ", ".join(f"{w:.8f}" for w in weights)
