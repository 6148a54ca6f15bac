"""CanViT assembly: token construction, Read/Write schedule, recurrent state and decoding.

Everything is batched: states hold ``[B, ...]`` tensors, a step takes ``B``
glimpses and ``B`` viewpoints. Token order in the backbone stream is
[CLS, VPE, registers, patches]; in the canvas stream [registers, patches].
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import geometry as geo
from . import tensorcore as tc
from .netops import (CanvasReadParams, CanvasWriteParams, RopeTable, ViTBlockParams,
                     canvas_read, canvas_write, compute_2d_rope, pad_rope, vit_block,
                     _trunc_normal)
from .tensorcore import Tensor


@dataclass
class ModelConfig:
    d_bb: int = 768
    d_can: int = 1024
    depth: int = 12
    heads_bb: int = 12
    heads_can: int = 8
    backbone_registers: int = 5
    canvas_registers: int = 16
    rw_stride: int = 2
    rope_base: float = 100.0
    patch_px: int = 16
    glimpse_px: int = 128
    rff_sigma: float = 1.0
    layerscale_init: float = 1e-5
    mlp_ratio: int = 4
    d_teacher: int = 768
    vpe_enabled: bool = True
    reads_enabled: bool = True
    canvas_qkvo: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.glimpse_px % self.patch_px:
            raise ValueError("glimpse_px must be a multiple of patch_px")
        if self.depth % self.rw_stride or (self.depth // self.rw_stride) % 2:
            raise ValueError("depth / rw_stride must be an even integer (R,W pairs)")
        if self.d_bb % self.heads_bb or (self.d_bb // self.heads_bb) % 4:
            raise ValueError("backbone head dim must be an integer divisible by 4")
        if self.d_can % self.heads_can or (self.d_can // self.heads_can) % 4:
            raise ValueError("canvas head dim must be an integer divisible by 4")
        if self.d_bb % 2:
            raise ValueError("d_bb must be even for the RFF lift")

    @property
    def glimpse_grid(self) -> int:
        return self.glimpse_px // self.patch_px

    @property
    def n_glimpse_patches(self) -> int:
        return self.glimpse_grid ** 2

    @property
    def n_special_tokens(self) -> int:
        return 1 + int(self.vpe_enabled) + self.backbone_registers

    @property
    def n_glimpse_tokens(self) -> int:
        return self.n_glimpse_patches + self.n_special_tokens

    @property
    def head_dim_bb(self) -> int:
        return self.d_bb // self.heads_bb

    @property
    def head_dim_can(self) -> int:
        return self.d_can // self.heads_can

    def schedule(self) -> list[tuple[int, str]]:
        """(block index after which it runs, 'R' or 'W'), alternating from a Read."""
        return [(i * self.rw_stride - 1, "RW"[(i - 1) % 2])
                for i in range(1, self.depth // self.rw_stride + 1)]

    def to_dict(self) -> dict:
        return asdict(self)


CANVIT_B = ModelConfig()

# Desk-scale gradient-check config: 2x2 glimpse grid, tiny dims.
MICRO = ModelConfig(d_bb=16, d_can=24, depth=4, heads_bb=2, heads_can=2, backbone_registers=2,
                    canvas_registers=2, patch_px=4, glimpse_px=8, d_teacher=8,
                    layerscale_init=0.1)

# Desk-scale training config for 64 px scenes.
DESK = ModelConfig(d_bb=32, d_can=48, depth=4, heads_bb=2, heads_can=2, backbone_registers=2,
                   canvas_registers=4, rw_stride=1, patch_px=4, glimpse_px=16, d_teacher=32,
                   layerscale_init=0.1)


# ---- parameters and state ------------------------------------------------------------


def _param(a) -> Tensor:
    return Tensor(a, requires_grad=True)


@dataclass
class ModelParams:
    patch_w: Tensor
    patch_b: Tensor
    canvas_init: Tensor
    canvas_reg_init: Tensor
    cls_init: Tensor
    bb_registers: Tensor
    vpe_ln_g: Tensor
    vpe_ln_b: Tensor
    blocks: list[ViTBlockParams]
    reads: list[CanvasReadParams]
    writes: list[CanvasWriteParams]
    dec_patch_ln_g: Tensor
    dec_patch_ln_b: Tensor
    dec_patch_w: Tensor
    dec_cls_ln_g: Tensor
    dec_cls_ln_b: Tensor
    dec_cls_w: Tensor
    rff: geo.RffParams

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        n_pairs = cfg.depth // cfg.rw_stride // 2
        pdim = cfg.patch_px * cfg.patch_px * 3
        return cls(
            patch_w=_param(_trunc_normal(rng, (pdim, cfg.d_bb))),
            patch_b=_param(np.zeros(cfg.d_bb)),
            canvas_init=_param(_trunc_normal(rng, (cfg.d_can,))),
            canvas_reg_init=_param(_trunc_normal(rng, (cfg.canvas_registers, cfg.d_can))),
            cls_init=_param(_trunc_normal(rng, (cfg.d_bb,))),
            bb_registers=_param(_trunc_normal(rng, (cfg.backbone_registers, cfg.d_bb))),
            vpe_ln_g=_param(np.ones(cfg.d_bb)),
            vpe_ln_b=_param(np.zeros(cfg.d_bb)),
            blocks=[ViTBlockParams.init(rng, cfg.d_bb, cfg.mlp_ratio, cfg.layerscale_init)
                    for _ in range(cfg.depth)],
            reads=[CanvasReadParams.init(rng, cfg.d_bb, cfg.d_can, cfg.canvas_qkvo)
                   for _ in range(n_pairs)],
            writes=[CanvasWriteParams.init(rng, cfg.d_bb, cfg.d_can, cfg.canvas_qkvo)
                    for _ in range(n_pairs)],
            dec_patch_ln_g=_param(np.ones(cfg.d_can)),
            dec_patch_ln_b=_param(np.zeros(cfg.d_can)),
            dec_patch_w=_param(_trunc_normal(rng, (cfg.d_can, cfg.d_teacher))),
            dec_cls_ln_g=_param(np.ones(cfg.d_bb)),
            dec_cls_ln_b=_param(np.zeros(cfg.d_bb)),
            dec_cls_w=_param(_trunc_normal(rng, (cfg.d_bb, cfg.d_teacher))),
            rff=geo.RffParams.sample(rng, cfg.d_bb, cfg.rff_sigma),
        )

    def named(self) -> dict[str, Tensor]:
        """Flat name -> learnable tensor map (the RFF matrix is not learnable)."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Tensor):
                out[f.name] = v
            elif isinstance(v, list):
                for i, bundle in enumerate(v):
                    out.update(bundle.named(f"{f.name}.{i}."))
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        """Everything needed to rebuild the params, including ``rff.B``."""
        out = {k: t.data for k, t in self.named().items()}
        out["rff.B"] = self.rff.B
        return out

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        p = cls.init(cfg, seed=0)
        named = p.named()
        missing = set(named) - set(arrays)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)[:5]}")
        for k, t in named.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"{k}: shape {arrays[k].shape} != expected {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)
        p.rff = geo.RffParams(np.array(arrays["rff.B"], dtype=np.float64))
        return p

    def zero_grad(self):
        for t in self.named().values():
            t.grad = None


@dataclass
class ModelState:
    canvas_patches: Tensor  # [B, H*W, D_can]
    canvas_registers: Tensor  # [B, R, D_can]
    cls: Tensor  # [B, D_bb]
    grid: tuple[int, int]

    @property
    def batch(self) -> int:
        return self.cls.shape[0]

    def patches_grid(self) -> np.ndarray:
        h, w = self.grid
        return self.canvas_patches.data.reshape(self.batch, h, w, -1)

    def detach(self) -> "ModelState":
        return ModelState(self.canvas_patches.detach(), self.canvas_registers.detach(),
                          self.cls.detach(), self.grid)


@dataclass
class StepOutput:
    Z_hat: Tensor  # [B, H, W, D_teacher]
    z_hat: Tensor  # [B, D_teacher]
    state: ModelState
    write_residuals: list[Tensor] = field(default_factory=list)
    vpe_out: Tensor | None = None


def init_state(params: ModelParams, cfg: ModelConfig, H: int, W: int, batch: int = 1) -> ModelState:
    if H < 1 or W < 1:
        raise ValueError("canvas grid must be at least 1x1")
    patches = tc.broadcast_to(params.canvas_init, (batch, H * W, cfg.d_can))
    regs = tc.broadcast_to(params.canvas_reg_init, (batch, cfg.canvas_registers, cfg.d_can))
    cls = tc.broadcast_to(params.cls_init, (batch, cfg.d_bb))
    return ModelState(patches, regs, cls, (H, W))


def patchify(glimpse, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """[B, G, G, 3] pixels -> [B, (G/p)^2, D_bb] tokens, row-major patch order."""
    glimpse = tc.as_tensor(glimpse)
    if glimpse.ndim == 3:
        glimpse = glimpse.reshape(1, *glimpse.shape)
    b, hh, ww, c = glimpse.shape
    if hh != cfg.glimpse_px or ww != cfg.glimpse_px or c != 3:
        raise ValueError(f"glimpse must be {cfg.glimpse_px}x{cfg.glimpse_px}x3, got {glimpse.shape[1:]}")
    g, p = cfg.glimpse_grid, cfg.patch_px
    x = glimpse.reshape(b, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(b, g * g, p * p * 3)
    return tc.linear(x, params.patch_w, params.patch_b)


@functools.lru_cache(maxsize=64)
def _canvas_rope(H: int, W: int, head_dim: int, base: float, n_regs: int) -> RopeTable:
    return pad_rope(compute_2d_rope(geo.grid_centers(H, W), head_dim, base), n_regs)


def viewpoint_array(viewpoints, batch: int | None = None) -> np.ndarray:
    """Normalize a Viewpoint, a list of them, or a [B, 3] array; validates each row."""
    if isinstance(viewpoints, geo.Viewpoint):
        viewpoints = [viewpoints]
    if not isinstance(viewpoints, np.ndarray):
        viewpoints = np.array([v.as_tuple() if isinstance(v, geo.Viewpoint) else v
                               for v in viewpoints], dtype=np.float64)
    viewpoints = np.asarray(viewpoints, dtype=np.float64).reshape(-1, 3)
    for row in viewpoints:
        geo.check_valid(geo.Viewpoint(*row))
    if batch is not None and len(viewpoints) == 1 and batch > 1:
        viewpoints = np.repeat(viewpoints, batch, axis=0)
    if batch is not None and len(viewpoints) != batch:
        raise ValueError(f"got {len(viewpoints)} viewpoints for batch {batch}")
    return viewpoints


def step(state: ModelState, glimpse, viewpoints, params: ModelParams, cfg: ModelConfig,
         grid: tuple[int, int] | None = None) -> StepOutput:
    if grid is not None and tuple(grid) != state.grid:
        raise ValueError(f"state grid {state.grid} != requested {grid}")
    B = state.batch
    vps = viewpoint_array(viewpoints, B)
    patches = patchify(glimpse, params, cfg)
    if patches.shape[0] != B:
        raise ValueError(f"{patches.shape[0]} glimpses for batch {B}")

    tokens = [state.cls.reshape(B, 1, cfg.d_bb)]
    vpe_feat = None
    if cfg.vpe_enabled:
        lifted = geo.lift_rff(geo.embed_viewpoints(vps), params.rff, cfg.d_bb)
        tokens.append(tc.layer_norm(Tensor(lifted.reshape(B, 1, cfg.d_bb)),
                                    params.vpe_ln_g, params.vpe_ln_b))
    tokens.append(tc.broadcast_to(params.bb_registers, (B, cfg.backbone_registers, cfg.d_bb)))
    tokens.append(patches)
    x_bb = tc.concat(tokens, axis=1)

    g = cfg.glimpse_grid
    centers = geo.glimpse_patch_centers_batch(vps, g, g)
    n_special = cfg.n_special_tokens
    rope_self = pad_rope(compute_2d_rope(centers, cfg.head_dim_bb, cfg.rope_base), n_special)
    rope_bb_can = pad_rope(compute_2d_rope(centers, cfg.head_dim_can, cfg.rope_base), n_special)
    H, W = state.grid
    rope_can = _canvas_rope(H, W, cfg.head_dim_can, cfg.rope_base, cfg.canvas_registers)

    x_can = tc.concat([state.canvas_registers, state.canvas_patches], axis=1)
    interactions = dict(cfg.schedule())
    n_read = n_write = 0
    residuals = []
    for i, blk in enumerate(params.blocks):
        x_bb = vit_block(x_bb, blk, rope_self, cfg.heads_bb)
        kind = interactions.get(i)
        if kind == "R":
            if cfg.reads_enabled:
                x_bb = x_bb + canvas_read(x_bb, x_can, rope_bb_can, rope_can,
                                          params.reads[n_read], cfg.heads_can)
            n_read += 1
        elif kind == "W":
            res = canvas_write(x_can, x_bb, rope_can, rope_bb_can, params.writes[n_write], cfg.heads_can)
            x_can = x_can + res
            residuals.append(res)
            n_write += 1

    R = cfg.canvas_registers
    new_state = ModelState(x_can[:, R:, :], x_can[:, :R, :], x_bb[:, 0, :], state.grid)
    if cfg.vpe_enabled:
        vpe_feat = x_bb[:, 1, :]
    Z_hat, z_hat = decode(new_state, params)
    return StepOutput(Z_hat, z_hat, new_state, residuals, vpe_feat)


def decode(state: ModelState, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Token-wise linear decode of LayerNorm'd canvas patches and CLS."""
    H, W = state.grid
    B = state.batch
    Z = tc.matmul(tc.layer_norm(state.canvas_patches, params.dec_patch_ln_g, params.dec_patch_ln_b),
                  params.dec_patch_w)
    z = tc.matmul(tc.layer_norm(state.cls.reshape(B, 1, -1), params.dec_cls_ln_g, params.dec_cls_ln_b),
                  params.dec_cls_w)
    return Z.reshape(B, H, W, -1), z.reshape(B, -1)


# ---- rollouts ------------------------------------------------------------------------


@dataclass
class RolloutTrace:
    """Per-timestep record of a (batched) rollout."""

    viewpoints: list[np.ndarray] = field(default_factory=list)  # T x [B, 3]
    outputs: list[StepOutput] = field(default_factory=list)
    loss_patch: list[np.ndarray] = field(default_factory=list)  # T x [B]
    loss_cls: list[np.ndarray] = field(default_factory=list)
    canvases: list[np.ndarray] = field(default_factory=list)  # T x [B, H, W, D_can]

    @property
    def T(self) -> int:
        return len(self.viewpoints)

    def check(self):
        for name in ("outputs", "loss_patch", "loss_cls", "canvases"):
            n = len(getattr(self, name))
            if n not in (0, self.T):
                raise ValueError(f"trace field {name} has {n} entries for T={self.T}")


def rollout(scenes, policy, T: int, params: ModelParams, cfg: ModelConfig, grid=(8, 8),
            targets=None, keep_outputs: bool = True, keep_canvases: bool = False) -> RolloutTrace:
    """Run ``T`` steps from a fresh canvas over ``scenes`` ([B, S, S, 3] or [S, S, 3]).

    ``policy`` follows the ``policies.Policy`` interface. ``targets`` is an optional
    (Z_star [B, H, W, D], z_star [B, D]) pair in standardized space.
    """
    from .distill import reconstruction_terms
    from .scene import extract_glimpses

    if T < 1:
        raise ValueError("rollout length must be >= 1")
    scenes = np.asarray(scenes, dtype=np.float64)
    if scenes.ndim == 3:
        scenes = scenes[None]
    B = scenes.shape[0]
    H, W = grid
    state = init_state(params, cfg, H, W, B)
    policy.reset(B)
    trace = RolloutTrace()
    for t in range(T):
        vps = viewpoint_array(policy.next(t, state=state, params=params, cfg=cfg), B)
        glimpse = extract_glimpses(scenes, vps, cfg.glimpse_px)
        out = step(state, glimpse, vps, params, cfg)
        state = out.state
        trace.viewpoints.append(vps)
        if keep_outputs:
            trace.outputs.append(out)
        if keep_canvases:
            trace.canvases.append(state.patches_grid().copy())
        if targets is not None:
            patch, cls = reconstruction_terms(out.Z_hat, out.z_hat, *targets)
            trace.loss_patch.append(patch.data.copy())
            trace.loss_cls.append(cls.data.copy())
    trace.check()
    return trace
