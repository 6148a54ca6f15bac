"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest -s tests/test_acceptance.py`` to see the lines inline; they are
also echoed through pytest's terminal reporter. Criterion 10 trains six desk-scale
models and takes roughly 20 minutes on one CPU core.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from canvit import distill as ds
from canvit import flops as fl
from canvit import netops as nn
from canvit import policies as pol
from canvit import tensorcore as tc
from canvit.checkpoint import load_model, save_model
from canvit.cli import main as cli_main
from canvit.geometry import Viewpoint, embed_viewpoint, is_valid
from canvit.model import CANVIT_B, DESK, MICRO, ModelParams, init_state, rollout, step
from canvit.scene import extract_glimpse
from canvit.tensorcore import Tensor

RESULTS = []


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}"
        RESULTS.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        assert ok, line
    return _report


# ---- 1-3: FLOPs ---------------------------------------------------------------------


def test_c01_canvas_projection_ratio(report):
    r = fl.ratio_canvas_projection(1024, 71)
    report(1, 7.15 <= r <= 7.27, f"canvas/glimpse projection ratio {r:.3f} in [7.15, 7.27]")


def test_c02_rw_pair_gflops(report):
    a = fl.flops_rw_pair(CANVIT_B, 64, 64) / 1e9
    b = fl.flops_rw_pair(CANVIT_B, 64, 64, with_canvas_qkvo=True) / 1e9
    ok = abs(a - 2.8) <= 0.28 and abs(b - 37.3) <= 3.73
    report(2, ok, f"R/W pair {a:.2f} GFLOPs (2.8 +-10%), with canvas QKVO {b:.2f} GFLOPs (37.3 +-10%)")


def test_c03_flop_oracle_equivalence(report):
    rng = np.random.default_rng(2024)
    worst, lines = 0.0, []
    for i in range(3):
        heads = int(rng.choice([1, 2]))
        depth, stride = [(4, 2), (4, 1), (2, 1)][int(rng.integers(0, 3))]
        cfg = replace(MICRO, d_bb=8 * heads * int(rng.integers(1, 3)), d_can=8 * heads * int(rng.integers(1, 4)),
                      heads_bb=heads, heads_can=heads, depth=depth, rw_stride=stride,
                      canvas_registers=int(rng.integers(0, 4)), backbone_registers=int(rng.integers(0, 3)),
                      canvas_qkvo=bool(rng.integers(0, 2)), vpe_enabled=bool(rng.integers(0, 2)))
        H, W = (int(v) for v in rng.integers(2, 6, size=2))
        analytic = fl.flops_timestep(cfg, H, W).total
        counted = fl.instrumented_timestep(cfg, H, W, seed=i)
        rel = abs(analytic - counted) / counted
        worst = max(worst, rel)
        lines.append(f"{analytic}/{counted}")
    report(3, worst <= 0.01, f"analytic vs instrumented matmul FLOPs, worst rel diff {worst:.2e} ({', '.join(lines)})")


# ---- 4: VPE propositions -------------------------------------------------------------


def _random_valid(rng, s_lo=0.02):
    s = rng.uniform(s_lo, 1.0)
    return Viewpoint(*rng.uniform(-(1 - s), 1 - s, size=2), s)


def _dist(a, b):
    return float(np.linalg.norm(embed_viewpoint(a).as_array() - embed_viewpoint(b).as_array()))


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def test_c04_vpe_propositions(report):
    rng = np.random.default_rng(4)
    N = 10_000
    worst = {"scale": 0.0, "translation": 0.0, "isotropy": 0.0, "lemma": 0.0}
    for _ in range(N):
        # scale invariance; c > 1 is redrawn until both scaled viewpoints stay valid
        q1, q2 = _random_valid(rng), _random_valid(rng)
        while True:
            c = rng.uniform(0.05, 1.0 / max(q1.s, q2.s))
            c1, c2 = (Viewpoint(c * q.x, c * q.y, c * q.s) for q in (q1, q2))
            if is_valid(c1) and is_valid(c2):
                break
        worst["scale"] = max(worst["scale"], _rel(_dist(c1, c2), _dist(q1, q2)))

        # equal-scale translation, offset drawn inside the range both can absorb
        s = rng.uniform(0.02, 0.9)
        a, b = (Viewpoint(*rng.uniform(-(1 - s), 1 - s, size=2), s) for _ in range(2))
        lo = np.maximum([-(1 - s) - a.x, -(1 - s) - a.y], [-(1 - s) - b.x, -(1 - s) - b.y])
        hi = np.minimum([(1 - s) - a.x, (1 - s) - a.y], [(1 - s) - b.x, (1 - s) - b.y])
        dx, dy = rng.uniform(lo, hi)
        a2, b2 = Viewpoint(a.x + dx, a.y + dy, s), Viewpoint(b.x + dx, b.y + dy, s)
        worst["translation"] = max(worst["translation"], _rel(_dist(a2, b2), _dist(a, b)))

        # planar isotropy: centers inside the inscribed disk stay valid under any Q
        theta = rng.uniform(0, 2 * math.pi)
        Q = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        if rng.integers(0, 2):
            Q = Q @ np.diag([1.0, -1.0])
        pts = []
        for _ in range(2):
            s = rng.uniform(0.02, 1.0)
            r, phi = (1 - s) * math.sqrt(rng.uniform()), rng.uniform(0, 2 * math.pi)
            pts.append((np.array([r * math.cos(phi), r * math.sin(phi)]), s))
        p1, p2 = (Viewpoint(*c, s) for c, s in pts)
        r1, r2 = (Viewpoint(*(Q @ c), s) for c, s in pts)
        worst["isotropy"] = max(worst["isotropy"], _rel(_dist(r1, r2), _dist(p1, p2)))

        # distance identity, evaluated from raw coordinates
        direct = (q1.x / q1.s - q2.x / q2.s) ** 2 + (q1.y / q1.s - q2.y / q2.s) ** 2 \
            + (math.log(q1.s) - math.log(q2.s)) ** 2
        worst["lemma"] = max(worst["lemma"], _rel(_dist(q1, q2) ** 2, direct))
    ok = all(v <= 1e-10 for v in worst.values())
    report(4, ok, f"{N} cases each, worst rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# ---- 5: policy distributions ---------------------------------------------------------


def test_c05_policy_distributions(report):
    rng = np.random.default_rng(5)
    s = pol.sample_iid_viewpoints(rng, 1_000_000)[:, 2]
    ks = stats.kstest(s, pol.iid_scale_cdf)
    lengths = pol.sample_rollout_length(np.random.default_rng(6), 2, 0.5, size=1_000_000)
    mean_T = float(lengths.mean())
    c2f = pol.c2f_sequence(np.random.default_rng(7), 21)
    tiles = {v.as_tuple() for lvl in range(3) for v in pol.quadtree_level(lvl)}
    covers = len(c2f) == 21 and {v.as_tuple() for v in c2f} == tiles
    reverse = all(pol.f2c_sequence(np.random.default_rng(k), T) == pol.c2f_sequence(np.random.default_rng(k), T)[::-1]
                  for k in range(20) for T in (1, 5, 21, 30))
    ok = ks.pvalue > 0.01 and abs(mean_T - 4.0) <= 0.02 and covers and reverse
    report(5, ok, f"K-S p={ks.pvalue:.3f} (>0.01), mean length {mean_T:.4f} (4 +-0.02), "
                  f"C2F covers levels 0-2: {covers}, F2C = reverse(C2F): {reverse}")


# ---- 6: gradient checks --------------------------------------------------------------


def _weighted(fn, rng):
    probe = {}

    def f(*xs):
        out = fn(*xs)
        if "w" not in probe:
            probe["w"] = rng.normal(size=out.shape)
        return tc.sum_(tc.mul(out, probe["w"]))
    return f


def _primitive_cases(rng):
    T = lambda *shape: Tensor(rng.normal(size=shape), requires_grad=True)  # noqa: E731
    yield "add", lambda a, b: tc.add(a, b), [T(3, 4), T(4)]
    yield "mul", lambda a, b: tc.mul(a, b), [T(3, 4), T(3, 1)]
    yield "exp", tc.exp, [T(4, 3)]
    yield "gelu", tc.gelu, [T(2, 3, 4)]
    yield "matmul", tc.matmul, [T(2, 3, 4), T(4, 5)]
    yield "linear", tc.linear, [T(3, 4), T(4, 2), T(2)]
    yield "concat/slice", lambda a, b: tc.concat([a, b], axis=1)[:, 1::2], [T(2, 3), T(2, 2)]
    yield "gather", lambda a: tc.gather(a, np.array([[0, 2], [2, 2]]), axis=0), [T(3, 4)]
    yield "mean", lambda a: tc.mean(a, axis=(0, 2), keepdims=True), [T(2, 3, 4)]
    yield "layer_norm", tc.layer_norm, [T(3, 5), T(5), T(5)]
    yield "softmax", tc.softmax, [T(3, 4)]
    yield "sdpa", tc.softmax_sdpa, [T(2, 3, 4), T(2, 5, 4), T(2, 5, 3)]
    rope = nn.compute_2d_rope(rng.uniform(-1, 1, (5, 2)), 8)
    yield "rope", lambda x: nn.apply_2d_rope(x, rope), [T(2, 5, 8)]
    yield "multihead", lambda x: nn.from_multihead(tc.gelu(nn.to_multihead(x, 2))), [T(2, 5, 8)]
    blk = nn.ViTBlockParams.init(rng, 8, layerscale=0.5)
    mask = np.array([True, False, True, True, True])
    rope4 = nn.compute_2d_rope(rng.uniform(-1, 1, (4, 2)), 4)
    yield "vit_block", lambda x, *ps: nn.vit_block(x, blk, rope4, 2, mask), [T(2, 5, 8)] + list(blk.named().values())
    for qkvo in (False, True):
        rp = nn.CanvasReadParams.init(rng, 8, 16, qkvo)
        wp = nn.CanvasWriteParams.init(rng, 8, 16, qkvo)
        for t in list(rp.named().values()) + list(wp.named().values()):
            t.data = rng.normal(size=t.shape) * (0.5 if t.ndim > 1 else 0.2)
        rb = nn.compute_2d_rope(rng.uniform(-1, 1, (3, 2)), 8)
        rc = nn.compute_2d_rope(rng.uniform(-1, 1, (5, 2)), 8)
        ps = list(rp.named().values()) + list(wp.named().values())
        yield (f"canvas_read{'+qkvo' if qkvo else ''}",
               lambda xb, xc, *p, rp=rp, rb=rb, rc=rc: nn.canvas_read(xb, xc, rb, rc, rp, 2), [T(3, 8), T(5, 16)] + ps)
        yield (f"canvas_write{'+qkvo' if qkvo else ''}",
               lambda xb, xc, *p, wp=wp, rb=rb, rc=rc: nn.canvas_write(xc, xb, rc, rb, wp, 2), [T(3, 8), T(5, 16)] + ps)
    yield "glimpse", lambda s: extract_glimpse(s, Viewpoint(0.1, -0.2, 0.6), 5), [Tensor(rng.uniform(size=(6, 6, 3)))]


def test_c06_gradient_checks(report):
    rng = np.random.default_rng(6)
    worst, failed = 0.0, []
    for name, fn, inputs in _primitive_cases(rng):
        rep = tc.grad_check(_weighted(fn, rng), inputs, tol=1e-4)
        worst = max(worst, rep.max_rel_error)
        if not rep.passed:
            failed.append(name)
    model = ds.model_grad_check(MICRO, seed=0, grid=(3, 3), T=2, max_elements=12, tol=1e-4)
    assert MICRO.d_bb == 16 and MICRO.d_can == 24 and MICRO.depth == 4 and MICRO.glimpse_grid == 2
    ok = not failed and model.passed
    report(6, ok, f"primitives worst rel err {worst:.1e}{' failed ' + ','.join(failed) if failed else ''}; "
                  f"micro model {model.max_rel_error:.1e} over {model.n_checked} entries (tol 1e-4)")


# ---- 7-9: model properties -----------------------------------------------------------


def test_c07_temporal_credit_assignment(report):
    cfg = MICRO
    params = ModelParams.init(cfg, 7)
    rng = np.random.default_rng(7)
    gl = [Tensor(rng.uniform(size=(1, cfg.glimpse_px, cfg.glimpse_px, 3)), requires_grad=True) for _ in range(4)]
    vps = [pol.sample_iid_viewpoints(rng, 1) for _ in range(4)]
    Zs, zs = rng.normal(size=(1, 3, 3, cfg.d_teacher)), rng.normal(size=(1, cfg.d_teacher))

    def loss_at(target):
        def fn(t, out):
            if t == target:
                return tc.sum_(ds.reconstruction_terms(out.Z_hat, out.z_hat, Zs, zs)[0])
            return None
        return fn

    ds.tbptt_rollout(init_state(params, cfg, 3, 3), gl, vps, params, cfg, 2, loss_at(1))
    within = float(np.abs(gl[0].grad).max()) if gl[0].grad is not None else 0.0
    for g in gl:
        g.grad = None
    ds.tbptt_rollout(init_state(params, cfg, 3, 3), gl, vps, params, cfg, 2, loss_at(2))
    across = 0.0 if gl[1].grad is None else float(np.abs(gl[1].grad).max())
    report(7, within > 0 and across == 0.0,
           f"K=2: |dloss_1/dglimpse_0| max {within:.2e} (nonzero), |dloss_2/dglimpse_1| max {across} (exactly 0)")


def test_c08_asymmetry_audit(report):
    offenders = []
    for cfg in (MICRO, DESK, replace(MICRO, d_bb=16, d_can=32, heads_can=2)):
        params = ModelParams.init(cfg, 8)
        for name, t in params.named().items():
            if name.startswith(("reads.", "writes.")) and t.ndim == 2 and t.shape == (cfg.d_can, cfg.d_can):
                offenders.append(name)
    # the same enumeration does flag the symmetric variant
    sym = ModelParams.init(replace(MICRO, canvas_qkvo=True), 8)
    flagged = [n for n, t in sym.named().items() if n.startswith(("reads.", "writes.")) and t.shape == (24, 24)]

    cfg = MICRO
    params = ModelParams.init(cfg, 9)
    rng = np.random.default_rng(9)
    state = init_state(params, cfg, 3, 3, 2)
    exact = True
    for _ in range(3):
        out = step(state, rng.uniform(size=(2, cfg.glimpse_px, cfg.glimpse_px, 3)),
                   pol.sample_iid_viewpoints(rng, 2), params, cfg)
        before = np.concatenate([state.canvas_registers.data, state.canvas_patches.data], axis=1)
        after = np.concatenate([out.state.canvas_registers.data, out.state.canvas_patches.data], axis=1)
        acc = before
        for r in out.write_residuals:
            acc = acc + r.data
        exact &= bool(np.array_equal(after - before, acc - before)) and bool(np.array_equal(after, acc))
        state = out.state
    ok = not offenders and len(flagged) == 4 and exact
    report(8, ok, f"no D_can x D_can R/W matrix ({len(offenders)} found; canvas-QKVO control flags {len(flagged)}), "
                  f"canvas delta == sum of write residuals bit-exact: {exact}")


def test_c09_canvas_resolution_generalization(report):
    cfg = replace(DESK, d_bb=16, d_can=16, depth=2, canvas_registers=2, d_teacher=8)
    tcfg = ds.TrainConfig(steps=5, batch_size=4, grid=8)
    scenes = ds.make_scenes(9, 8)
    res = ds.micro_pretrain(scenes, cfg, tcfg)
    shapes, finite = [], True
    for H in (4, 16):
        tr = rollout(scenes[:2], pol.make_policy("r-iid", np.random.default_rng(0), 3), 3, res.params, cfg,
                     grid=(H, H))
        for o in tr.outputs:
            finite &= bool(np.isfinite(o.Z_hat.data).all() and np.isfinite(o.z_hat.data).all())
        shapes.append(tr.outputs[-1].Z_hat.shape)
    ok = shapes == [(2, 4, 4, 8), (2, 16, 16, 8)] and finite
    report(9, ok, f"trained at 8x8, rollouts decode {shapes[0]} and {shapes[1]}, all finite: {finite}")


# ---- 10: micro distillation ----------------------------------------------------------

DISTILL_SEEDS = (0, 1, 2)
DISTILL = dict(steps=300, lr=1e-3, batch_size=16)


def test_c10_micro_distillation(report):
    t0 = time.time()
    train, held = ds.make_scenes(0, 256), ds.make_scenes(1, 64)
    ratios, pairs = [], []
    for seed in DISTILL_SEEDS:
        tcfg = ds.TrainConfig(seed=seed, **DISTILL)
        base = ds.micro_pretrain(train, DESK, tcfg, held)
        mcfg, acfg = ds.apply_ablation("no_reads", DESK, tcfg)
        abl = ds.micro_pretrain(train, mcfg, acfg, held)
        ratios.append(base.eval_final["total"] / base.eval_initial["total"])
        pairs.append((base.eval_final["patch"], abl.eval_final["patch"]))
    elapsed = time.time() - t0
    worse = sum(a > b for b, a in pairs)
    ok = len(train) >= 256 and max(ratios) < 0.5 and worse == 3 and elapsed < 1800
    report(10, ok, f"held-out loss final/initial {', '.join(f'{r:.3f}' for r in ratios)} (<0.5); "
                   f"patch loss baseline vs no_reads {', '.join(f'{b:.2f}<{a:.2f}' for b, a in pairs)} "
                   f"({worse}/3 worse); {elapsed / 60:.1f} min (<30)")


# ---- 11: determinism -----------------------------------------------------------------


def test_c11_determinism(report, tmp_path, capsys):
    (tmp_path / "run.cfg").write_text("d_bb = 16\nd_can = 16\ndepth = 2\ncanvas_registers = 2\nd_teacher = 8\n"
                                      "steps = 6\nbatch_size = 4\nn_scenes = 16\nn_heldout = 4\nseed = 3\n")
    for name in ("a", "b"):
        code = cli_main(["train", "--config", str(tmp_path / "run.cfg"), "--out", str(tmp_path / f"{name}.cvit"),
                         "--metrics", str(tmp_path / f"{name}.csv")])
        capsys.readouterr()
        assert code == 0
    same_csv = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    same_ckpt = (tmp_path / "a.cvit").read_bytes() == (tmp_path / "b.cvit").read_bytes()
    cfg, params, st, config = load_model(tmp_path / "a.cvit")
    save_model(tmp_path / "c.cvit", params, cfg, st, extra={k: v for k, v in config.items() if "." in k})
    roundtrip = (tmp_path / "c.cvit").read_bytes() == (tmp_path / "a.cvit").read_bytes()
    report(11, same_csv and same_ckpt and roundtrip,
           f"metrics CSVs identical: {same_csv}, checkpoints identical: {same_ckpt}, "
           f"load/save round trip byte-identical: {roundtrip}")

