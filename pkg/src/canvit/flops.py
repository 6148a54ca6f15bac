"""Analytic FLOP model (1 multiply-add = 2 FLOPs, matmuls only) and instrumented oracles.

Counted: patch embedding, block projections, attention score/value products,
MLPs, Read/Write projections, decode heads. Not counted: layer norms, softmax,
elementwise ops, RoPE rotations and the Fourier-feature lift of the viewpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import ModelConfig


@dataclass
class FlopReport:
    components: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.components.values())

    def add(self, name: str, count: int):
        count = int(count)
        if count < 0:
            raise ValueError(f"negative FLOP count for {name}")
        self.components[name] = self.components.get(name, 0) + count

    def scaled(self, k: int) -> "FlopReport":
        return FlopReport({n: v * k for n, v in self.components.items()})

    def rows(self) -> list[tuple[str, int]]:
        return list(self.components.items()) + [("total", self.total)]


def sdpa_flops(n_q: int, n_k: int, d: int) -> int:
    """q kᵀ plus attn·v: 4 N_q N_k D."""
    return 4 * n_q * n_k * d


def linear_flops(n: int, d_in: int, d_out: int) -> int:
    return 2 * n * d_in * d_out


def ratio_canvas_projection(d_can: int, n_g: int) -> float:
    """One canvas-side D_can x D_can projection over one Canvas Attention SDPA: D_can / (2 N_g)."""
    if n_g < 1:
        raise ValueError("N_g must be >= 1")
    return d_can / (2 * n_g)


def _n_can(cfg: ModelConfig, H: int, W: int) -> int:
    return H * W + cfg.canvas_registers


def read_flops(cfg: ModelConfig, H: int, W: int, canvas_qkvo: bool | None = None) -> dict[str, int]:
    qkvo = cfg.canvas_qkvo if canvas_qkvo is None else canvas_qkvo
    n_g, n_can = cfg.n_glimpse_tokens, _n_can(cfg, H, W)
    out = {
        "read.glimpse_proj": 2 * linear_flops(n_g, cfg.d_bb, cfg.d_can),
        "read.sdpa": sdpa_flops(n_g, n_can, cfg.d_can),
    }
    if qkvo:
        out["read.canvas_proj"] = 2 * linear_flops(n_can, cfg.d_can, cfg.d_can)
    return out


def write_flops(cfg: ModelConfig, H: int, W: int, canvas_qkvo: bool | None = None) -> dict[str, int]:
    qkvo = cfg.canvas_qkvo if canvas_qkvo is None else canvas_qkvo
    n_g, n_can = cfg.n_glimpse_tokens, _n_can(cfg, H, W)
    out = {
        "write.glimpse_proj": 2 * linear_flops(n_g, cfg.d_bb, cfg.d_can),
        "write.sdpa": sdpa_flops(n_can, n_g, cfg.d_can),
    }
    if qkvo:
        out["write.canvas_proj"] = 2 * linear_flops(n_can, cfg.d_can, cfg.d_can)
    return out


def flops_rw_pair(cfg: ModelConfig, H: int, W: int, with_canvas_qkvo: bool = False) -> int:
    """One Read plus one Write: glimpse-side projections, two SDPAs, optional canvas-side maps."""
    return (sum(read_flops(cfg, H, W, with_canvas_qkvo).values())
            + sum(write_flops(cfg, H, W, with_canvas_qkvo).values()))


def vit_block_flops(n: int, d: int, mlp_ratio: int) -> dict[str, int]:
    return {
        "block.qkvo": linear_flops(n, d, 3 * d) + linear_flops(n, d, d),
        "block.sdpa": sdpa_flops(n, n, d),
        "block.mlp": 2 * linear_flops(n, d, mlp_ratio * d),
    }


def flops_timestep(cfg: ModelConfig, H: int, W: int) -> FlopReport:
    rep = FlopReport()
    n_g = cfg.n_glimpse_tokens
    rep.add("patch_embed", linear_flops(cfg.n_glimpse_patches, cfg.patch_px ** 2 * 3, cfg.d_bb))
    for _ in range(cfg.depth):
        for k, v in vit_block_flops(n_g, cfg.d_bb, cfg.mlp_ratio).items():
            rep.add(k, v)
    for _, kind in cfg.schedule():
        if kind == "R" and cfg.reads_enabled:
            parts = read_flops(cfg, H, W)
        elif kind == "W":
            parts = write_flops(cfg, H, W)
        else:
            continue
        for k, v in parts.items():
            rep.add(k, v)
    rep.add("decode.patch", linear_flops(H * W, cfg.d_can, cfg.d_teacher))
    rep.add("decode.cls", linear_flops(1, cfg.d_bb, cfg.d_teacher))
    return rep


def flops_rollout(cfg: ModelConfig, H: int, W: int, T: int) -> FlopReport:
    if T < 1:
        raise ValueError("T must be >= 1")
    return flops_timestep(cfg, H, W).scaled(T)


@dataclass(frozen=True)
class VitDims:
    d: int = 768
    depth: int = 12
    heads: int = 12
    mlp_ratio: int = 4
    registers: int = 0


VIT_B = VitDims()


def passive_vit_tokens(input_px: int, patch_px: int, registers: int = 0) -> int:
    if input_px % patch_px:
        raise ValueError("input size must be divisible by the patch size")
    return (input_px // patch_px) ** 2 + 1 + registers


def flops_passive_vit(dims: VitDims, input_px: int, patch_px: int) -> FlopReport:
    n = passive_vit_tokens(input_px, patch_px, dims.registers)
    rep = FlopReport()
    rep.add("patch_embed", linear_flops((input_px // patch_px) ** 2, patch_px ** 2 * 3, dims.d))
    for _ in range(dims.depth):
        for k, v in vit_block_flops(n, dims.d, dims.mlp_ratio).items():
            rep.add(k, v)
    return rep


# ---- curves --------------------------------------------------------------------------


def pair_cost_ratio(cfg: ModelConfig, H: int, W: int) -> float:
    """Symmetric (canvas QKVO) over asymmetric R/W pair cost."""
    return flops_rw_pair(cfg, H, W, True) / flops_rw_pair(cfg, H, W, False)


def scaling_curve(cfg: ModelConfig, grids, dims: VitDims = VIT_B) -> list[dict]:
    """Per-timestep CanViT cost (both variants) vs a passive ViT producing the same patch grid."""
    rows = []
    for g in grids:
        rows.append({
            "grid": g,
            "canvit": flops_timestep(cfg, g, g).total,
            "canvit_qkvo": flops_timestep(replace(cfg, canvas_qkvo=True), g, g).total,
            "passive_vit": flops_passive_vit(dims, g * cfg.patch_px, cfg.patch_px).total,
        })
    return rows


def ratio_curve(cfg: ModelConfig, glimpse_tokens, canvas_sides) -> list[dict]:
    """Symmetric/asymmetric pair-cost ratio over glimpse token counts and canvas sides."""
    rows = []
    for n_g in glimpse_tokens:
        # realize N_g through the register count so every other term stays fixed
        regs = n_g - cfg.n_glimpse_patches - 1 - int(cfg.vpe_enabled)
        if regs < 0:
            raise ValueError(f"N_g={n_g} is below the glimpse patch count")
        c = replace(cfg, backbone_registers=regs)
        for side in canvas_sides:
            rows.append({"n_g": n_g, "canvas_side": side, "ratio": pair_cost_ratio(c, side, side)})
    return rows


# ---- instrumented oracles ------------------------------------------------------------


def instrumented_timestep(cfg: ModelConfig, H: int, W: int, seed: int = 0) -> int:
    """Count matmul FLOPs of one real forward step (batch 1)."""
    from .model import ModelParams, init_state, step
    from .tensorcore import count_matmul_flops

    params = ModelParams.init(cfg, seed)
    state = init_state(params, cfg, H, W, 1)
    glimpse = np.random.default_rng(seed).uniform(size=(1, cfg.glimpse_px, cfg.glimpse_px, 3))
    with count_matmul_flops() as c:
        step(state, glimpse, np.array([[0.1, -0.2, 0.5]]), params, cfg)
    return c.total


def instrumented_passive_vit(dims: VitDims, input_px: int, patch_px: int, seed: int = 0) -> int:
    from . import tensorcore as tc
    from .netops import ViTBlockParams, vit_block
    from .tensorcore import Tensor, count_matmul_flops

    rng = np.random.default_rng(seed)
    g = input_px // patch_px
    n = passive_vit_tokens(input_px, patch_px, dims.registers)
    img = rng.uniform(size=(1, g * g, patch_px * patch_px * 3))
    w = Tensor(rng.normal(0, 0.02, size=(patch_px * patch_px * 3, dims.d)))
    extra = Tensor(rng.normal(0, 0.02, size=(1, n - g * g, dims.d)))
    block = ViTBlockParams.init(rng, dims.d, dims.mlp_ratio)
    with count_matmul_flops() as c:
        x = tc.concat([extra, tc.matmul(Tensor(img), w)], axis=1)
        for _ in range(dims.depth):
            x = vit_block(x, block, None, dims.heads)
    return c.total
