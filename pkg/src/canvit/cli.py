"""Command-line entry point: ``python -m canvit <command> ...``.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

TRACE_COLUMNS = ("t", "x", "y", "s", "loss_patch", "loss_cls", "write_norm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("grid sides must be positive")
    return h, w


def _model_config(args, default: str = "desk"):
    from .config import PRESETS, load_config

    if getattr(args, "config", None):
        return load_config(args.config).model
    return PRESETS[getattr(args, "preset", None) or default]


# ---- commands ------------------------------------------------------------------------


def cmd_rollout(args) -> int:
    from . import policies as pol
    from .checkpoint import load_model
    from .distill import SyntheticTeacher
    from .model import ModelParams, rollout
    from .scene import load_scene
    from .viz import cosine_dissimilarity, pca_visualize, save_heatmap

    scene = load_scene(args.scene)
    stats = None
    if args.checkpoint:
        cfg, params, stats, _ = load_model(args.checkpoint)
    else:
        cfg = _model_config(args)
        params = ModelParams.init(cfg, args.seed)
    H, W = args.grid
    targets = None
    if stats is not None and stats.mean.shape[:2] == (H, W) and H == W and scene.side % H == 0:
        teacher = SyntheticTeacher(H, cfg.d_teacher)
        std = stats.standardize(teacher(scene.pixels[None]))
        targets = (std.Z_star, std.z_star)
    rng = np.random.default_rng(args.seed)
    probe = pol.LinearProbe.random(rng, cfg.d_can) if args.policy == "eg-c2f" else None
    policy = pol.make_policy(args.policy, rng, args.steps, probe=probe)
    trace = rollout(scene.pixels, policy, args.steps, params, cfg, (H, W), targets=targets,
                    keep_outputs=True, keep_canvases=bool(args.viz_dir))

    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(TRACE_COLUMNS)
        for t in range(trace.T):
            x, y, s = trace.viewpoints[t][0]
            lp = repr(float(trace.loss_patch[t][0])) if trace.loss_patch else ""
            lc = repr(float(trace.loss_cls[t][0])) if trace.loss_cls else ""
            wn = sum(float(np.linalg.norm(r.data)) for r in trace.outputs[t].write_residuals)
            w.writerow([t, repr(float(x)), repr(float(y)), repr(float(s)), lp, lc, repr(wn)])
    finally:
        if out is not sys.stdout:
            out.close()

    if args.viz_dir:
        d = Path(args.viz_dir)
        d.mkdir(parents=True, exist_ok=True)
        prev = None
        for t, canvas in enumerate(trace.canvases):
            pca_visualize(canvas[0], out=d / f"canvas_t{t:03d}.ppm")
            if prev is not None:
                save_heatmap(d / f"delta_t{t:03d}.ppm", cosine_dissimilarity(prev, canvas[0]), vmax=2.0)
            prev = canvas[0]
    return 0


def _scene_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory {d} not found")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".ppm", ".pfm"))
    if not files:
        raise FileNotFoundError(f"no .ppm/.pfm scenes in {d}")
    return files


def cmd_train(args) -> int:
    from .checkpoint import save_model
    from .config import format_config, load_config
    from .distill import make_scenes, micro_pretrain
    from .scene import load_scene

    run = load_config(args.config)
    data = run.data
    if args.data:
        scenes = np.stack([load_scene(p).pixels for p in _scene_files(args.data)])
        n_held = min(data["n_heldout"], len(scenes) // 4)
        train, held = (scenes[:-n_held], scenes[-n_held:]) if n_held else (scenes, None)
    else:
        train = make_scenes(data["data_seed"], data["n_scenes"], data["scene_px"])
        held = make_scenes(data["data_seed"] + 1, data["n_heldout"], data["scene_px"]) \
            if data["n_heldout"] else None
    metrics = args.metrics or str(Path(args.out).with_suffix(".metrics.csv"))
    result = micro_pretrain(train, run.model, run.train, held, metrics_path=metrics)
    extra = {f"train.{k}": v for k, v in format_config(run.train).items()}
    save_model(args.out, result.params, run.model, result.stats, extra)
    if result.eval_final:
        i, f = result.eval_initial, result.eval_final
        print(f"held-out loss: initial {i['total']:.4f} -> final {f['total']:.4f} "
              f"(patch {i['patch']:.4f} -> {f['patch']:.4f}, cls {i['cls']:.4f} -> {f['cls']:.4f})")
    print(f"wrote {args.out} and {metrics}")
    return 0


def cmd_flops(args) -> int:
    from dataclasses import replace

    from . import flops as fl

    cfg = _model_config(args, default="canvit-b")
    if args.with_canvas_qkvo:
        cfg = replace(cfg, canvas_qkvo=True)
    H, W = args.grid
    rep = fl.flops_rollout(cfg, H, W, args.T)
    w = csv.writer(sys.stdout)
    w.writerow(["component", "flops", "gflops"])
    for name, v in rep.rows():
        w.writerow([name, v, f"{v / 1e9:.4f}"])
    asym = fl.flops_rw_pair(cfg, H, W, False)
    sym = fl.flops_rw_pair(cfg, H, W, True)
    w.writerow(["rw_pair", asym, f"{asym / 1e9:.4f}"])
    w.writerow(["rw_pair_canvas_qkvo", sym, f"{sym / 1e9:.4f}"])
    r = fl.ratio_canvas_projection(cfg.d_can, cfg.n_glimpse_tokens)
    print(f"# canvas-side projection / SDPA = D_can/(2 N_g) = {cfg.d_can}/(2*{cfg.n_glimpse_tokens}) = {r:.3f}")
    print(f"# R/W pair: {asym / 1e9:.3f} GFLOPs without canvas QKVO, {sym / 1e9:.3f} with ({sym / asym:.2f}x)")
    return 0


def cmd_policy_sample(args) -> int:
    from . import policies as pol
    from .model import ModelParams, init_state

    rng = np.random.default_rng(args.seed)
    if args.policy in ("r-iid", "f-iid", "c2f", "f2c", "rfs"):
        policy = pol.make_policy(args.policy, rng, args.n)
        policy.reset(1)
        rows = np.array([policy.next(t)[0] for t in range(args.n)])
    elif args.policy == "eg-c2f":
        cfg = _model_config(args)
        params = ModelParams.init(cfg, args.seed)
        state = init_state(params, cfg, 8, 8, 1)
        state.canvas_patches.data = rng.normal(size=state.canvas_patches.shape)
        policy = pol.make_policy("eg-c2f", rng, args.n, probe=pol.LinearProbe.random(rng, cfg.d_can))
        policy.reset(1)
        rows = np.array([policy.next(t, state=state)[0] for t in range(args.n)])
    else:
        raise UsageError(f"unknown policy {args.policy!r}; choose from {', '.join(pol.POLICY_NAMES)}")
    w = csv.writer(sys.stdout)
    w.writerow(["t", "x", "y", "s"])
    for t, (x, y, s) in enumerate(rows):
        w.writerow([t, repr(float(x)), repr(float(y)), repr(float(s))])
    s = rows[:, 2]
    print(f"# n={len(rows)} mean_s={s.mean():.4f} min_s={s.min():.4f} max_s={s.max():.4f} "
          f"mean_x={rows[:, 0].mean():.4f} mean_y={rows[:, 1].mean():.4f}", file=sys.stderr)
    return 0


def cmd_gradcheck(args) -> int:
    from .distill import model_grad_check
    from .model import ModelParams

    cfg = _model_config(args, default="micro")
    rep = model_grad_check(cfg, args.seed, args.grid, args.T, max_elements=args.max_elements)
    names = list(ModelParams.init(cfg, args.seed).named())
    for n, e in zip(names, rep.per_input):
        print(f"{n:40s} {e:.3e}")
    status = "PASS" if rep.passed else "FAIL"
    print(f"{status}: max relative error {rep.max_rel_error:.3e} (tol {rep.tol:g}) over {rep.n_checked} entries")
    return 0 if rep.passed else 2


def cmd_bench(args) -> int:
    from .model import ModelParams, init_state, step

    cfg = _model_config(args)
    H, W = args.grid
    params = ModelParams.init(cfg, 0)
    rng = np.random.default_rng(0)
    glimpse = rng.uniform(size=(args.batch, cfg.glimpse_px, cfg.glimpse_px, 3))
    vps = np.tile([[0.0, 0.0, 1.0]], (args.batch, 1))
    times = []
    for i in range(args.warmup + args.iters):
        state = init_state(params, cfg, H, W, args.batch)
        t0 = time.perf_counter()
        step(state, glimpse, vps, params, cfg)
        if i >= args.warmup:
            times.append(time.perf_counter() - t0)
    ms = np.array(times) * 1e3
    print(f"step latency over {args.iters} iters (batch {args.batch}, grid {H}x{W}): "
          f"min {ms.min():.3f} ms, median {np.median(ms):.3f} ms")
    return 0


def cmd_scenes(args) -> int:
    from .distill import make_scene
    from .scene import write_ppm

    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for i in range(args.n):
        write_ppm(d / f"scene_{i:05d}.ppm", make_scene(rng, args.px))
    print(f"wrote {args.n} scenes to {d}")
    return 0


# ---- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .config import PRESETS
    from .policies import POLICY_NAMES

    p = _Parser(prog="canvit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def model_args(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--preset", choices=sorted(PRESETS))

    sp = sub.add_parser("rollout", help="run a rollout on one scene and write a trace CSV")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--policy", required=True, choices=POLICY_NAMES)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--grid", type=_grid, default=(8, 8))
    sp.add_argument("--checkpoint")
    sp.add_argument("--viz-dir")
    sp.add_argument("--out", help="trace CSV path (default: stdout)")
    sp.add_argument("--seed", type=int, default=0)
    model_args(sp)
    sp.set_defaults(fn=cmd_rollout)

    sp = sub.add_parser("train", help="micro distillation run")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", help="directory of .ppm/.pfm scenes (default: synthetic)")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--metrics", help="metrics CSV path (default: <out>.metrics.csv)")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("flops", help="analytic FLOP breakdown")
    sp.add_argument("--grid", type=_grid, default=(64, 64))
    sp.add_argument("--with-canvas-qkvo", action="store_true")
    sp.add_argument("--T", type=int, default=1)
    model_args(sp)
    sp.set_defaults(fn=cmd_flops)

    sp = sub.add_parser("policy-sample", help="sample viewpoints from a policy")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    model_args(sp)
    sp.set_defaults(fn=cmd_policy_sample)

    sp = sub.add_parser("gradcheck", help="full-model finite-difference gradient check")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--grid", type=_grid, default=(3, 3))
    sp.add_argument("--T", type=int, default=2)
    sp.add_argument("--max-elements", type=int, default=6)
    model_args(sp)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("bench", help="per-step latency")
    sp.add_argument("--grid", type=_grid, default=(8, 8))
    sp.add_argument("--iters", type=int, default=20)
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--batch", type=int, default=1)
    model_args(sp)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("scenes", help="write synthetic training scenes as PPM")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=256)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--px", type=int, default=64)
    sp.set_defaults(fn=cmd_scenes)
    return p


def main(argv=None) -> int:
    from .config import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_usage().strip())
        for name in ("steps", "n", "iters", "T", "batch"):
            if getattr(args, name, 1) is not None and getattr(args, name, 1) < 1:
                raise UsageError(f"--{name} must be >= 1")
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
