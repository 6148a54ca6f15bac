from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from canvit import flops as fl
from canvit.model import CANVIT_B, MICRO


def test_eq1_ratio_examples():
    assert fl.ratio_canvas_projection(1024, 71) == pytest.approx(7.2113, abs=1e-4)
    assert fl.ratio_canvas_projection(142, 71) == 1.0
    with pytest.raises(ValueError):
        fl.ratio_canvas_projection(10, 0)


@given(st.integers(1, 4096), st.integers(1, 4096), st.integers(1, 2000))
def test_eq1_identity_from_component_model(d_can, n_g, n_can):
    one_proj = fl.linear_flops(n_can, d_can, d_can)
    one_sdpa = fl.sdpa_flops(n_g, n_can, d_can)
    assert one_proj / one_sdpa == pytest.approx(fl.ratio_canvas_projection(d_can, n_g), rel=1e-12)


def test_rw_pair_component_enumeration():
    cfg = CANVIT_B
    n_g, n_can, dbb, dcan = 71, 64 * 64 + 16, cfg.d_bb, cfg.d_can
    per_matmul = [2 * n_g * dbb * dcan] * 4 + [2 * n_g * n_can * dcan] * 4
    assert fl.flops_rw_pair(cfg, 64, 64) == sum(per_matmul)
    assert fl.flops_rw_pair(cfg, 64, 64, True) == sum(per_matmul) + 4 * 2 * n_can * dcan * dcan


def test_small_canvas_limit_sdpa_dominated_by_formula():
    cfg = replace(CANVIT_B, d_can=8, heads_can=2, canvas_registers=0)
    n_g = cfg.n_glimpse_tokens
    parts = {**fl.read_flops(cfg, 1, 1), **fl.write_flops(cfg, 1, 1)}
    assert parts["read.sdpa"] == parts["write.sdpa"] == 4 * n_g * 1 * 8


def test_timestep_linearity_and_rollout_scaling():
    cfg = CANVIT_B
    a, b = fl.flops_timestep(cfg, 16, 16), fl.flops_timestep(cfg, 32, 32)
    assert a.components["block.sdpa"] == b.components["block.sdpa"]
    sdpa_a = a.components["read.sdpa"]
    # canvas-dependent SDPA terms are affine in N_can = HW + registers
    regs = cfg.canvas_registers
    per_token = sdpa_a // (16 * 16 + regs)
    assert b.components["read.sdpa"] == per_token * (32 * 32 + regs)
    assert fl.flops_rollout(cfg, 8, 8, 2).total == 2 * fl.flops_rollout(cfg, 8, 8, 1).total
    assert a.total == sum(a.components.values())
    assert all(v >= 0 for v in a.components.values())


def test_canvas_sdpa_quadruples_when_side_doubles_without_registers():
    cfg = replace(CANVIT_B, canvas_registers=0)
    a, b = fl.flops_timestep(cfg, 16, 16), fl.flops_timestep(cfg, 32, 32)
    assert b.components["read.sdpa"] == 4 * a.components["read.sdpa"]
    assert b.components["write.sdpa"] == 4 * a.components["write.sdpa"]


def test_reads_disabled_drops_read_terms():
    rep = fl.flops_timestep(replace(MICRO, reads_enabled=False), 3, 3)
    assert not any(k.startswith("read") for k in rep.components)


def test_passive_vit_tokens_and_quadratic_sdpa():
    assert fl.passive_vit_tokens(224, 16) == 197
    with pytest.raises(ValueError):
        fl.passive_vit_tokens(100, 16)
    a = fl.flops_passive_vit(fl.VIT_B, 256, 16).components["block.sdpa"]
    b = fl.flops_passive_vit(fl.VIT_B, 512, 16).components["block.sdpa"]
    n1, n2 = 257, 1025
    assert b / a == pytest.approx(n2 ** 2 / n1 ** 2)
    assert b / a == pytest.approx(16, rel=0.01)


@pytest.mark.parametrize("seed", [0, 1])
def test_instrumented_forward_matches_analytic(seed):
    rng = np.random.default_rng(seed)
    cfg = replace(MICRO, canvas_qkvo=bool(seed), vpe_enabled=not seed)
    H, W = rng.integers(1, 6, size=2)
    assert fl.instrumented_timestep(cfg, int(H), int(W)) == fl.flops_timestep(cfg, int(H), int(W)).total


def test_passive_vit_instrumented_small():
    dims = fl.VitDims(d=16, depth=2, heads=2)
    assert fl.instrumented_passive_vit(dims, 32, 8) == fl.flops_passive_vit(dims, 32, 8).total


def test_curves_are_monotone():
    rows = fl.ratio_curve(CANVIT_B, [71, 100, 200], [32, 64])
    by_side = {}
    for r in rows:
        by_side.setdefault(r["canvas_side"], []).append(r["ratio"])
    for ratios in by_side.values():
        assert ratios == sorted(ratios, reverse=True)
    for n_g in (71, 100, 200):
        r = [x["ratio"] for x in rows if x["n_g"] == n_g]
        assert r[1] > r[0]
    curve = fl.scaling_curve(CANVIT_B, [8, 16, 32])
    assert all(c["canvit_qkvo"] > c["canvit"] for c in curve)
    assert curve[-1]["passive_vit"] / curve[0]["passive_vit"] > curve[-1]["canvit"] / curve[0]["canvit"]
