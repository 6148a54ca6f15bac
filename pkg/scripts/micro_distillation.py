"""Desk-scale distillation with ablations, several seeds, one summary CSV.

    python3 scripts/micro_distillation.py --seeds 0 1 2 --ablations no_reads --out results/distill

Writes one metrics CSV per run plus ``summary.csv`` with held-out losses before and
after training. The defaults match the acceptance run.
"""

import argparse
import csv
import time
from pathlib import Path

from canvit import distill as ds
from canvit.checkpoint import save_model
from canvit.model import DESK


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--ablations", nargs="*", default=["no_reads"],
                    help="names from distill.ABLATIONS, optionally name:value")
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--n-train", type=int, default=256)
    ap.add_argument("--n-heldout", type=int, default=64)
    ap.add_argument("--out", type=Path, default=Path("results/distill"))
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    train, held = ds.make_scenes(0, args.n_train), ds.make_scenes(1, args.n_heldout)
    rows = []
    for seed in args.seeds:
        for abl in [None] + args.ablations:
            tcfg = ds.TrainConfig(steps=args.steps, lr=args.lr, batch_size=args.batch_size, seed=seed)
            mcfg = DESK
            if abl:
                name, _, value = abl.partition(":")
                mcfg, tcfg = ds.apply_ablation(name, mcfg, tcfg, value or None)
            tag = f"{abl or 'baseline'}_seed{seed}".replace(":", "-")
            t0 = time.time()
            res = ds.micro_pretrain(train, mcfg, tcfg, held, metrics_path=args.out / f"{tag}.csv")
            save_model(args.out / f"{tag}.cvit", res.params, mcfg, res.stats)
            row = {"run": abl or "baseline", "seed": seed, "seconds": round(time.time() - t0, 1)}
            row.update({f"initial_{k}": v for k, v in res.eval_initial.items()})
            row.update({f"final_{k}": v for k, v in res.eval_final.items()})
            rows.append(row)
            print(f"{tag}: total {res.eval_initial['total']:.3f} -> {res.eval_final['total']:.3f}, "
                  f"patch {res.eval_final['patch']:.3f} ({row['seconds']} s)", flush=True)
    with open(args.out / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
