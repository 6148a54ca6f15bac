from dataclasses import replace

import numpy as np
import pytest

from canvit import policies as pol
from canvit import tensorcore as tc
from canvit.geometry import FULL_SCENE, InvalidViewpoint, Viewpoint
from canvit.model import (CANVIT_B, DESK, MICRO, ModelConfig, ModelParams, ModelState, decode,
                          init_state, patchify, rollout, step)
from canvit.tensorcore import Tape, Tensor


@pytest.fixture(scope="module")
def micro():
    return MICRO, ModelParams.init(MICRO, seed=3)


def glimpse(cfg, rng, b=1):
    return rng.uniform(size=(b, cfg.glimpse_px, cfg.glimpse_px, 3))


def test_canvit_b_token_counts():
    assert CANVIT_B.n_glimpse_patches == 64
    assert CANVIT_B.n_glimpse_tokens == 71
    assert replace(CANVIT_B, vpe_enabled=False).n_glimpse_tokens == 70
    assert CANVIT_B.head_dim_can == 128


def test_schedule_alternates_from_read():
    assert CANVIT_B.schedule() == [(1, "R"), (3, "W"), (5, "R"), (7, "W"), (9, "R"), (11, "W")]
    assert DESK.schedule() == [(0, "R"), (1, "W"), (2, "R"), (3, "W")]
    with pytest.raises(ValueError):
        replace(CANVIT_B, rw_stride=4)  # 3 interactions cannot pair up
    with pytest.raises(ValueError):
        ModelConfig(glimpse_px=100)


def test_init_state_broadcasts(micro):
    cfg, params = micro
    s = init_state(params, cfg, 3, 5, batch=2)
    assert s.canvas_patches.shape == (2, 15, cfg.d_can)
    np.testing.assert_array_equal(s.canvas_patches.data, np.broadcast_to(params.canvas_init.data, (2, 15, cfg.d_can)))
    s2 = init_state(params, cfg, 3, 5, batch=2)
    np.testing.assert_array_equal(s.cls.data, s2.cls.data)
    assert init_state(params, cfg, 32, 32).canvas_patches.shape[1] == 1024
    with pytest.raises(ValueError):
        init_state(params, cfg, 0, 3)


def test_patchify_contract(micro):
    cfg, params = micro
    out = patchify(np.zeros((cfg.glimpse_px, cfg.glimpse_px, 3)), params, cfg).data
    np.testing.assert_array_equal(out, np.broadcast_to(params.patch_b.data, out.shape))
    rng = np.random.default_rng(0)
    g = glimpse(cfg, rng)
    p = cfg.patch_px
    swapped = g.copy()  # swap patch (0,0) with patch (1,1)
    swapped[:, :p, :p], swapped[:, p:2 * p, p:2 * p] = g[:, p:2 * p, p:2 * p], g[:, :p, :p]
    a, b = patchify(g, params, cfg).data, patchify(swapped, params, cfg).data
    np.testing.assert_allclose(b[:, [3, 1, 2, 0]], a, rtol=1e-14)
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 4, 4, 3)), params, cfg)
    assert CANVIT_B.glimpse_grid ** 2 == 64


def test_step_is_deterministic_and_shaped(micro):
    cfg, params = micro
    rng = np.random.default_rng(1)
    g = glimpse(cfg, rng, 2)
    vps = np.array([[0.1, 0.2, 0.5], [0.0, 0.0, 1.0]])
    s = init_state(params, cfg, 3, 4, 2)
    a, b = step(s, g, vps, params, cfg), step(s, g, vps, params, cfg)
    np.testing.assert_array_equal(a.Z_hat.data, b.Z_hat.data)
    assert a.Z_hat.shape == (2, 3, 4, cfg.d_teacher) and a.z_hat.shape == (2, cfg.d_teacher)
    with pytest.raises(InvalidViewpoint):
        step(s, g, np.array([[0.9, 0.0, 0.5], [0, 0, 1]]), params, cfg)
    with pytest.raises(ValueError):
        step(s, g, vps, params, cfg, grid=(4, 4))


def test_canvas_update_is_sum_of_write_residuals(micro):
    cfg, params = micro
    rng = np.random.default_rng(2)
    s = init_state(params, cfg, 3, 3)
    out = step(s, glimpse(cfg, rng), FULL_SCENE, params, cfg)
    before = np.concatenate([s.canvas_registers.data, s.canvas_patches.data], axis=1)
    after = np.concatenate([out.state.canvas_registers.data, out.state.canvas_patches.data], axis=1)
    acc = before
    for r in out.write_residuals:
        acc = acc + r.data
    assert len(out.write_residuals) == len([k for _, k in cfg.schedule() if k == "W"])
    np.testing.assert_array_equal(after, acc)


def test_zeroed_interactions_reduce_to_plain_vit(micro):
    cfg, params = micro
    p = ModelParams.from_arrays(cfg, params.arrays())
    for w in p.writes:
        w.v_w.data[:] = 0
        w.v_b.data[:] = 0
    for r in p.reads:
        r.o_w.data[:] = 0
        r.o_b.data[:] = 0
    rng = np.random.default_rng(3)
    g = glimpse(cfg, rng)
    s = init_state(p, cfg, 3, 3)
    out = step(s, g, FULL_SCENE, p, cfg)
    np.testing.assert_array_equal(out.state.canvas_patches.data, s.canvas_patches.data)
    no_reads = step(s, g, FULL_SCENE, p, replace(cfg, reads_enabled=False))
    np.testing.assert_array_equal(out.state.cls.data, no_reads.state.cls.data)


def test_decode_contract(micro):
    cfg, params = micro
    rng = np.random.default_rng(4)
    s = init_state(params, cfg, 2, 3)
    s.canvas_patches = Tensor(rng.normal(size=s.canvas_patches.shape))
    Z, z = decode(s, params)
    perm = rng.permutation(6)
    s2 = ModelState(Tensor(s.canvas_patches.data[:, perm]), s.canvas_registers, s.cls, (2, 3))
    Z2, _ = decode(s2, params)
    np.testing.assert_allclose(Z2.data.reshape(1, 6, -1), Z.data.reshape(1, 6, -1)[:, perm], rtol=1e-14)
    p = ModelParams.from_arrays(cfg, params.arrays())
    p.dec_patch_w.data[:] = 0
    np.testing.assert_array_equal(decode(s, p)[0].data, 0.0)


def test_state_carries_only_canvas_and_cls():
    assert set(ModelState.__dataclass_fields__) == {"canvas_patches", "canvas_registers", "cls", "grid"}


def test_vpe_ablation_is_well_formed():
    cfg = replace(MICRO, vpe_enabled=False)
    params = ModelParams.init(cfg, 0)
    out = step(init_state(params, cfg, 3, 3), glimpse(cfg, np.random.default_rng(5)), FULL_SCENE, params, cfg)
    assert np.isfinite(out.Z_hat.data).all() and out.vpe_out is None
    assert cfg.n_glimpse_tokens == MICRO.n_glimpse_tokens - 1


def test_rollout_trace(micro):
    cfg, params = micro
    scene = np.random.default_rng(6).uniform(size=(16, 16, 3))
    trace = rollout(scene, pol.make_policy("f-iid", np.random.default_rng(0), 3), 3, params, cfg,
                    grid=(4, 4), keep_canvases=True)
    assert trace.T == 3 and len(trace.outputs) == 3 and trace.canvases[0].shape == (1, 4, 4, cfg.d_can)
    np.testing.assert_array_equal(trace.viewpoints[0], [[0, 0, 1]])
    with pytest.raises(pol.PolicyExhausted):
        rollout(scene, pol.make_policy("f-iid", np.random.default_rng(0), 2), 3, params, cfg, grid=(4, 4))


def test_gradient_flows_across_steps(micro):
    cfg, params = micro
    rng = np.random.default_rng(7)
    g0 = Tensor(glimpse(cfg, rng), requires_grad=True)
    with Tape() as tape:
        s = init_state(params, cfg, 3, 3)
        s = step(s, g0, FULL_SCENE, params, cfg).state
        out = step(s, glimpse(cfg, rng), Viewpoint(0.2, 0.2, 0.5), params, cfg)
        loss = tc.sum_(tc.mul(out.Z_hat, out.Z_hat))
    tape.backward(loss)
    assert np.abs(g0.grad).max() > 0
