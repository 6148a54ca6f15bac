"""Analytic FLOP tables: canvas/glimpse projection ratio, R/W pair costs, scaling vs a passive ViT.

    python3 scripts/flop_curves.py --out results/flops
"""

import argparse
import csv
from pathlib import Path

from canvit import flops as fl
from canvit.model import CANVIT_B


def write(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/flops"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    cfg = CANVIT_B

    sides = [8, 16, 32, 64, 96, 128]
    pair = [{"canvas_side": g, "rw_pair": fl.flops_rw_pair(cfg, g, g),
             "rw_pair_canvas_qkvo": fl.flops_rw_pair(cfg, g, g, True),
             "ratio": fl.pair_cost_ratio(cfg, g, g)} for g in sides]
    write(args.out / "rw_pair.csv", pair)
    write(args.out / "scaling.csv", fl.scaling_curve(cfg, sides))
    write(args.out / "ratio_curve.csv", fl.ratio_curve(cfg, [66, 71, 81, 129], [16, 32, 64]))

    print(f"canvas/glimpse projection ratio (1024, 71): {fl.ratio_canvas_projection(1024, 71):.3f}")
    for r in pair:
        print(f"{r['canvas_side']:4d}x{r['canvas_side']:<4d} pair {r['rw_pair'] / 1e9:8.2f} GFLOPs, "
              f"with canvas QKVO {r['rw_pair_canvas_qkvo'] / 1e9:8.2f} GFLOPs ({r['ratio']:.1f}x)")


if __name__ == "__main__":
    main()
