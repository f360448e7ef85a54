"""Sweep the row-MAV threshold over a synthetic delta and report heatmap and sparsity.

Writes one heatmap CSV per threshold into --out-dir and prints kept-row fractions.
"""
import argparse
from pathlib import Path

import numpy as np

from layerswap import DType, delta_row_mavs, export_heatmap, heatmap, sparsify_rows
from layerswap.fixtures import FixtureShape, make_fixture


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--role", choices=["task", "lang"], default="lang")
    ap.add_argument("--layers", type=int, default=8)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--points", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="sweep_out")
    args = ap.parse_args()

    fx = make_fixture(args.seed, FixtureShape(args.layers, args.hidden), DType.FLOAT32, roles=("pre", args.role))
    pre, ft = fx["pre"], fx[args.role]
    stats = delta_row_mavs(pre, ft)
    values = stats.all_values()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    print(f"{stats.total_rows} rows, aggregate MAV {stats.aggregate:.3e}, max {values.max():.3e}")
    print(f"{'tau':>10}  {'kept':>7}  mean heatmap cell")
    for tau in np.quantile(values, np.linspace(0, 0.99, args.points)):
        grid = heatmap(stats, float(tau), args.layers)
        _, sp = sparsify_rows(pre, ft, float(tau))
        export_heatmap(grid, "csv", out / f"heatmap_{tau:.3e}.csv")
        print(f"{tau:10.3e}  {sp.overall:7.3f}  {np.nanmean(grid.matrix()):.3f}")


if __name__ == "__main__":
    main()
