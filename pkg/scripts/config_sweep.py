"""Enumerate layer-swap configurations on a fixture and count tensors by source.

Useful for eyeballing how bottom/top/transition widths move tensors between experts.
"""
import argparse
import itertools
import logging

from layerswap import DType, SwapConfig, layer_swap, provenance
from layerswap.fixtures import FixtureShape, make_fixture


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--layers", type=int, default=12)
    ap.add_argument("--hidden", type=int, default=16)
    ap.add_argument("--max-width", type=int, default=3)
    args = ap.parse_args()
    logging.getLogger("layerswap").setLevel(logging.ERROR)

    fx = make_fixture(0, FixtureShape(args.layers, args.hidden), DType.FLOAT32, roles=("task", "lang"))
    task, lang = fx["task"], fx["lang"]
    widths = range(args.max_width + 1)
    print(f"{'b':>2} {'u':>2} {'tb':>2} {'tu':>2}  " + "  ".join(f"{k:>14}" for k in ("LANG", "TASK", "TRANSITION_AVG", "NON_LAYER")) + "  ok")
    for b, u, tb, tu in itertools.product(widths, repeat=4):
        if b + u + tb + tu > args.layers:
            continue
        cfg = SwapConfig(b, u, tb, tu)
        report = provenance(layer_swap(task, lang, cfg), task, lang, cfg)
        counts = {k: 0 for k in ("LANG", "TASK", "TRANSITION_AVG", "NON_LAYER")}
        for entry in report.entries.values():
            counts[entry.label] += 1
        print(f"{b:2d} {u:2d} {tb:2d} {tu:2d}  " + "  ".join(f"{counts[k]:14d}" for k in counts) + f"  {report.ok}")


if __name__ == "__main__":
    main()
