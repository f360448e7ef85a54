"""``layerswap`` command line.

Exit codes: 0 success, 2 usage/config error, 3 data/compatibility error, 4 I/O error.
Logs go to stderr as one JSON object per line.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from . import merge, recipe
from .analysis import (
    PRESET_THRESHOLDS,
    UndefinedWeightError,
    delta_row_mavs,
    expert_weight,
    export_heatmap,
    heatmap,
    heatmap_csv,
    heatmap_json,
    percentile_threshold,
)
from .checkpoint import CheckpointFormatError, CompatibilityError, diff_max, load_checkpoint, save_checkpoint, validate_compat
from .dtypes import DType
from .fixtures import ROLES, FixtureShape, make_fixture
from .merge import ConfigError, LayerRole, SwapConfig
from .recipe import MergeRecipe
from .topology import SchemeError, TopologyError, layer_count, load_scheme

log = logging.getLogger("layerswap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 2, 3, 4


class JsonLineFormatter(logging.Formatter):
    def format(self, rec: logging.LogRecord) -> str:
        doc = {"ts": round(rec.created, 3), "level": rec.levelname.lower(), "logger": rec.name, "msg": rec.getMessage()}
        payload = getattr(rec, "record", None)
        if payload is not None:
            doc["data"] = payload
        return json.dumps(doc, sort_keys=True, default=str)


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("layerswap")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser, merge_cmd: bool = False) -> None:
    p.add_argument("--scheme", help="naming scheme JSON (default: $LAYERSWAP_SCHEME or built-in Llama scheme)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads (default: %(default)s)")
    p.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    if merge_cmd:
        p.add_argument("--out", required=True, help="output checkpoint path")
        p.add_argument("--print-recipe", action="store_true", help="print the resolved recipe and exit")


def _add_swap_flags(p: argparse.ArgumentParser) -> None:
    d = SwapConfig()
    p.add_argument("--task", required=True, help="task expert checkpoint")
    p.add_argument("--lang", required=True, help="language expert checkpoint")
    p.add_argument("--bottom", type=int, default=d.bottom, help="bottom layers from the language expert (default: %(default)s)")
    p.add_argument("--top", type=int, default=d.top, help="top layers from the language expert (default: %(default)s)")
    p.add_argument("--tb", type=int, default=d.lower_transition, help="lower transition layers (default: %(default)s)")
    p.add_argument("--tu", type=int, default=d.upper_transition, help="upper transition layers (default: %(default)s)")
    p.add_argument("--alpha-task", type=float, default=d.alpha_task, help="task weight in averages (default: %(default)s)")
    p.add_argument("--alpha-lang", type=float, default=d.alpha_lang, help="language weight in averages (default: %(default)s)")
    p.add_argument("--alpha-magnitude", action="store_true", help="set both alphas to inverse mean delta MAV (needs --base)")
    p.add_argument("--base", help="pretrained checkpoint, for --alpha-magnitude")
    p.add_argument("--norms", choices=["follow-layer", "average"], default="follow-layer", help="per-layer norm routing (default: %(default)s)")
    p.add_argument("--non-layer", choices=["average", "from-task", "from-lang"], default="average", help="embeddings/final norm/head routing (default: %(default)s)")


def _swap_params(a) -> dict:
    return {
        "bottom": a.bottom,
        "top": a.top,
        "lower_transition": a.tb,
        "upper_transition": a.tu,
        "alpha_task": a.alpha_task,
        "alpha_lang": a.alpha_lang,
        "norm_routing": a.norms.replace("-", "_"),
        "non_layer_routing": a.non_layer.replace("-", "_"),
        "alpha_mode": "magnitude" if a.alpha_magnitude else "fixed",
    }


def _parse_weights(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad --weights {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerswap", description="Re-compose and analyse transformer checkpoints.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("swap", help="layer swapping: outer layers from the language expert, middle from the task expert")
    _add_swap_flags(p)
    _add_common(p, merge_cmd=True)

    p = sub.add_parser("soup", help="uniform or weighted parameter average")
    p.add_argument("experts", nargs="+", help="two or more checkpoints")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--weights", help="comma-separated non-negative weights, e.g. 2,1")
    g.add_argument("--mav-weighted", action="store_true", help="weight by inverse mean delta MAV (needs --base)")
    p.add_argument("--base", help="pretrained checkpoint for --mav-weighted")
    _add_common(p, merge_cmd=True)

    p = sub.add_parser("ties", help="TIES merging (trim, elect sign, disjoint mean)")
    p.add_argument("experts", nargs="+")
    p.add_argument("--base", required=True, help="pretrained checkpoint")
    p.add_argument("--density", type=float, default=recipe.DEFAULTS["ties"]["density"], help="kept fraction per task vector (default: %(default)s)")
    p.add_argument("--lam", type=float, default=recipe.DEFAULTS["ties"]["lam"], help="task vector scale (default: %(default)s)")
    _add_common(p, merge_cmd=True)

    p = sub.add_parser("sparsify", help="keep fine-tuned rows whose delta MAV exceeds a threshold")
    p.add_argument("--base", required=True)
    p.add_argument("--ft", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--threshold", type=float)
    g.add_argument("--percentile", type=float, help="threshold = this percentile of all row MAVs")
    _add_common(p, merge_cmd=True)

    p = sub.add_parser("revert", help="restore whole transformer layers from the base model")
    p.add_argument("--base", required=True)
    p.add_argument("--ft", required=True)
    p.add_argument("--layers", required=True, help='layer set, e.g. "0-4,30-31"')
    _add_common(p, merge_cmd=True)

    p = sub.add_parser("run", help="execute a recipe file")
    p.add_argument("recipe")
    p.add_argument("--print-recipe", action="store_true")
    _add_common(p)

    p = sub.add_parser("analyze", help="row-MAV heatmap of a fine-tuning delta")
    p.add_argument("--base", required=True)
    p.add_argument("--ft", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--threshold", type=float)
    g.add_argument("--percentile", type=float)
    g.add_argument("--preset", choices=sorted(PRESET_THRESHOLDS), help="documented thresholds: " + ", ".join(f"{k}={v:g}" for k, v in PRESET_THRESHOLDS.items()))
    p.add_argument("--format", choices=["csv", "json", "svg"], default="csv")
    p.add_argument("--out", help="output file (default: stdout for csv/json)")
    _add_common(p)

    p = sub.add_parser("report", help="provenance audit of a layer-swapped checkpoint")
    p.add_argument("--merged", required=True)
    _add_swap_flags(p)
    p.add_argument("--strict", action="store_true", help="exit 3 if any tensor deviates")
    _add_common(p)

    p = sub.add_parser("diff", help="per-tensor max absolute difference")
    p.add_argument("a")
    p.add_argument("b")
    _add_common(p)

    p = sub.add_parser("fixture", help="write a deterministic synthetic (pre, task, lang) triple")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--attn-dim", type=int)
    p.add_argument("--kv-dim", type=int)
    p.add_argument("--ffn-dim", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--dtype", choices=[d.value for d in DType], default="F32")
    p.add_argument("--roles", default=",".join(ROLES), help="subset of pre,task,lang to write")
    p.add_argument("--out-dir", required=True)
    _add_common(p)

    p = sub.add_parser("scheme", help="print the naming scheme in effect as JSON")
    _add_common(p)
    return parser


# ---------------------------------------------------------------------------
# commands


def _recipe_from_args(a) -> MergeRecipe:
    c = a.command
    if c == "run":
        return MergeRecipe.load(a.recipe)
    if c == "swap":
        inputs = {"task": a.task, "lang": a.lang}
        if a.base:
            inputs["base"] = a.base
        return MergeRecipe("layer_swap", inputs, a.out, _swap_params(a), a.scheme)
    if c == "soup":
        if a.mav_weighted:
            if not a.base:
                raise ConfigError("--mav-weighted needs --base")
            return MergeRecipe("mav_soup", {"base": a.base, "experts": a.experts}, a.out, {}, a.scheme)
        weights = _parse_weights(a.weights) if a.weights else None
        return MergeRecipe("soup", {"experts": a.experts}, a.out, {"weights": weights}, a.scheme)
    if c == "ties":
        return MergeRecipe("ties", {"base": a.base, "experts": a.experts}, a.out, {"density": a.density, "lam": a.lam}, a.scheme)
    if c == "sparsify":
        return MergeRecipe("sparsify", {"base": a.base, "ft": a.ft}, a.out, {"threshold": a.threshold, "percentile": a.percentile}, a.scheme)
    return MergeRecipe("revert_layers", {"base": a.base, "ft": a.ft}, a.out, {"layers": a.layers}, a.scheme)


def _print_roles(roles: dict[int, LayerRole]) -> None:
    print("role        layers")
    for role in LayerRole:
        chosen = merge.layers_with(roles, role)
        shown = "{" + merge.format_layer_set(chosen) + "}" if chosen else "{}"
        print(f"{role.value:<11} {shown}  ({len(chosen)} layer{'' if len(chosen) == 1 else 's'})")


def cmd_merge(a) -> int:
    rec = recipe.resolve(_recipe_from_args(a))
    if a.scheme and rec.scheme is None:
        rec.scheme = a.scheme
    if a.print_recipe:
        print(rec.to_json())
        return EXIT_OK
    started = time.perf_counter()
    result = recipe.run(rec, threads=a.threads)
    info = result.info
    if "roles" in info:
        _print_roles(info["roles"])
    if "weights" in info:
        print(recipe.weights_line(info["weights"]))
    if "stats" in info:
        stats = info["stats"]
        print(f"threshold {info['threshold']:g}: kept {stats.kept_rows}/{stats.total_rows} rows ({stats.overall:.6f})")
        for name in stats.kept:
            print(f"  {stats.kept_fraction(name):.6f}  {name}")
    print(f"wrote {rec.output} ({len(result.merged)} tensors, {time.perf_counter() - started:.2f}s)")
    return EXIT_OK


def cmd_analyze(a) -> int:
    scheme = load_scheme(a.scheme)
    pre, ft = load_checkpoint(a.base), load_checkpoint(a.ft)
    log.info("resolved parameters", extra={"record": {k: v for k, v in vars(a).items() if k != "func"}})
    stats = delta_row_mavs(pre, ft, scheme)
    if a.threshold is not None:
        tau = a.threshold
    elif a.preset:
        tau = PRESET_THRESHOLDS[a.preset]
    else:
        tau = float(percentile_threshold(stats, a.percentile))
    grid = heatmap(stats, tau, layer_count(pre, scheme))
    summary = {"threshold": grid.threshold, "aggregate_mav": stats.aggregate, "rows": stats.total_rows, "missing_cells": len(grid.missing)}
    try:
        summary["expert_weight"] = expert_weight(stats)
    except UndefinedWeightError:
        summary["expert_weight"] = None
    log.info("delta summary", extra={"record": summary})
    if a.out:
        export_heatmap(grid, a.format, a.out)
        print(f"wrote {a.format} heatmap to {a.out}")
    elif a.format == "svg":
        raise ConfigError("svg output needs --out")
    else:
        sys.stdout.write(heatmap_csv(grid) if a.format == "csv" else heatmap_json(grid))
    return EXIT_OK


def cmd_report(a) -> int:
    scheme = load_scheme(a.scheme)
    merged, task, lang = (load_checkpoint(p) for p in (a.merged, a.task, a.lang))
    params = _swap_params(a)
    mode = params.pop("alpha_mode")
    cfg = recipe._swap_config(params)
    if mode == "magnitude":
        if not a.base:
            raise ConfigError("--alpha-magnitude needs --base")
        a_task, a_lang = merge.magnitude_alphas(load_checkpoint(a.base), task, lang, scheme)
        cfg = SwapConfig(**{**cfg.to_dict(), "alpha_task": a_task, "alpha_lang": a_lang})
    log.info("resolved parameters", extra={"record": cfg.to_dict()})
    report = merge.provenance(merged, task, lang, cfg, scheme)
    for name, entry in report.entries.items():
        flag = "!" if entry.deviation != 0 else " "
        print(f"{flag} {entry.label:<15} {entry.deviation:<12.6g} {name}")
    print(f"{len(report.deviating)} of {len(report.entries)} tensors deviate from their expected source")
    return EXIT_DATA if a.strict and not report.ok else EXIT_OK


def cmd_diff(a) -> int:
    x, y = load_checkpoint(a.a), load_checkpoint(a.b)
    compat = validate_compat(x, y)
    if not compat.ok:
        print(compat.describe())
        return EXIT_DATA
    diffs = diff_max(x, y)
    for name, d in diffs.items():
        print(f"{d:<12.6g} {name}")
    print(f"max over all tensors: {max(diffs.values(), default=0.0):.6g}")
    return EXIT_OK


def cmd_fixture(a) -> int:
    shape = FixtureShape(a.layers, a.hidden, a.attn_dim, a.kv_dim, a.ffn_dim, a.vocab)
    roles = [r.strip() for r in a.roles.split(",") if r.strip()]
    log.info("resolved parameters", extra={"record": {"seed": a.seed, "shape": vars(shape), "dtype": a.dtype, "roles": roles}})
    os.makedirs(a.out_dir, exist_ok=True)
    for role, ckpt in make_fixture(a.seed, shape, DType(a.dtype), roles).items():
        path = os.path.join(a.out_dir, f"{role}.safetensors")
        save_checkpoint(ckpt, path, threads=a.threads)
        print(f"wrote {path} ({ckpt.nbytes} payload bytes)")
    return EXIT_OK


def cmd_scheme(a) -> int:
    print(json.dumps(load_scheme(a.scheme).to_json(), indent=2))
    return EXIT_OK


COMMANDS = {
    "swap": cmd_merge,
    "soup": cmd_merge,
    "ties": cmd_merge,
    "sparsify": cmd_merge,
    "revert": cmd_merge,
    "run": cmd_merge,
    "analyze": cmd_analyze,
    "report": cmd_report,
    "diff": cmd_diff,
    "fixture": cmd_fixture,
    "scheme": cmd_scheme,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except (CompatibilityError, CheckpointFormatError, TopologyError, UndefinedWeightError) as exc:
        log.error(str(exc), extra={"record": {"kind": type(exc).__name__}})
        return EXIT_DATA
    except (ConfigError, SchemeError) as exc:
        log.error(str(exc), extra={"record": {"kind": type(exc).__name__}})
        return EXIT_USAGE
    except OSError as exc:
        log.error(str(exc), extra={"record": {"kind": type(exc).__name__}})
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
