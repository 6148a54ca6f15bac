"""Roll a checkpoint over one synthetic scene and dump PCA canvases and change heatmaps.

    python3 scripts/viz_rollout.py results/distill/baseline_seed0.cvit --policy c2f --steps 5
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from canvit.cli import main as cli_main
from canvit.distill import make_scene
from canvit.scene import write_ppm


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--policy", default="c2f")
    ap.add_argument("--steps", type=int, default=5)
    ap.add_argument("--grid", default="16x16")
    ap.add_argument("--scene-seed", type=int, default=7)
    ap.add_argument("--out", type=Path, default=Path("results/viz"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    scene = args.out / "scene.ppm"
    write_ppm(scene, make_scene(np.random.default_rng(args.scene_seed)))
    return cli_main(["rollout", "--scene", str(scene), "--policy", args.policy, "--steps", str(args.steps),
                     "--grid", args.grid, "--checkpoint", args.checkpoint, "--viz-dir", str(args.out),
                     "--out", str(args.out / "trace.csv")])


if __name__ == "__main__":
    sys.exit(main())
