"""Rotary embeddings from scene coordinates, pre-norm ViT blocks and Canvas Attention.

Token tensors are ``[..., N, D]``. Multi-head tensors are ``[..., H, N, head_dim]``.
Rotary tables cover every token of a stream; non-spatial tokens (CLS, VPE,
registers) get zero angle, i.e. identity rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor


@dataclass
class RopeTable:
    cos: np.ndarray  # [..., N, head_dim]
    sin: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.cos.shape[-2]

    @property
    def head_dim(self) -> int:
        return self.cos.shape[-1]


def rope_frequencies(head_dim: int, base: float) -> np.ndarray:
    if head_dim % 4:
        raise ValueError(f"2D RoPE needs head_dim divisible by 4, got {head_dim}")
    n = head_dim // 4
    return base ** (-2.0 * np.arange(n) / (head_dim / 2))


def compute_2d_rope(centers: np.ndarray, head_dim: int, base: float = 100.0) -> RopeTable:
    """Axial 2D rotary table for ``[..., N, 2]`` (y, x) centers.

    Pair j couples dims (j, j + head_dim/2). The first head_dim/4 pairs rotate by
    2*pi*x*f, the rest by 2*pi*y*f, with f geometric in ``base``.
    """
    centers = np.asarray(centers, dtype=np.float64)
    freqs = rope_frequencies(head_dim, base)
    ang_x = 2 * math.pi * centers[..., 1:2] * freqs
    ang_y = 2 * math.pi * centers[..., 0:1] * freqs
    ang = np.concatenate([ang_x, ang_y], axis=-1)
    ang = np.concatenate([ang, ang], axis=-1)
    return RopeTable(np.cos(ang), np.sin(ang))


def pad_rope(rope: RopeTable, n_before: int, n_after: int = 0) -> RopeTable:
    """Add identity rows for non-spatial tokens before/after the spatial ones."""
    return rope_for_tokens(rope, np.r_[np.zeros(n_before, bool), np.ones(rope.n_tokens, bool),
                                       np.zeros(n_after, bool)])


def rope_for_tokens(rope: RopeTable, mask: np.ndarray) -> RopeTable:
    """Scatter ``rope`` rows onto the tokens flagged True in ``mask``; others get identity."""
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() != rope.n_tokens:
        raise ValueError(f"rope covers {rope.n_tokens} tokens but mask flags {mask.sum()}")
    shape = rope.cos.shape[:-2] + (mask.size, rope.head_dim)
    cos = np.ones(shape)
    sin = np.zeros(shape)
    cos[..., mask, :] = rope.cos
    sin[..., mask, :] = rope.sin
    return RopeTable(cos, sin)


def _rot(x):
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rot_t(x):
    h = x.shape[-1] // 2
    return np.concatenate([x[..., h:], -x[..., :h]], axis=-1)


def apply_2d_rope(x: Tensor, rope: RopeTable) -> Tensor:
    """Rotate multi-head ``x`` [..., H, N, hd] by a table of shape [..., N, hd]."""
    if x.shape[-2:] != rope.cos.shape[-2:]:
        raise ValueError(f"rope table {rope.cos.shape} does not match tokens {x.shape}")
    cos, sin = rope.cos, rope.sin
    if x.ndim > cos.ndim:  # head axis sits between the table's batch and token axes
        cos, sin = cos[..., None, :, :], sin[..., None, :, :]
    return _rope_op(x, cos, sin)


def _rope_fwd(x, cos, sin):
    return x * cos + _rot(x) * sin, (cos, sin)


def _rope_bwd(ctx, g):
    cos, sin = ctx
    return (g * cos + _rot_t(g * sin), None, None)


_rope_op = tc.primitive(_rope_fwd, _rope_bwd)


def to_multihead(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    if d % heads:
        raise ValueError(f"dim {d} not divisible by {heads} heads")
    return tc.swapaxes(x.reshape(*lead, n, heads, d // heads), -2, -3)


def from_multihead(x: Tensor) -> Tensor:
    x = tc.swapaxes(x, -2, -3)
    *lead, n, h, hd = x.shape
    return x.reshape(*lead, n, h * hd)


# ---- parameter bundles ---------------------------------------------------------------


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


def _param(a) -> Tensor:
    return Tensor(a, requires_grad=True)


class ParamBundle:
    """Mixin for dataclasses whose fields are Tensors (or None for absent maps)."""

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Tensor):
                out[prefix + f.name] = v
        return out


@dataclass
class ViTBlockParams(ParamBundle):
    ln1_g: Tensor
    ln1_b: Tensor
    qkv_w: Tensor
    qkv_b: Tensor
    o_w: Tensor
    o_b: Tensor
    ls1: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    ls2: Tensor

    @classmethod
    def init(cls, rng, dim: int, mlp_ratio: int = 4, layerscale: float = 1e-5):
        hid = dim * mlp_ratio
        return cls(
            ln1_g=_param(np.ones(dim)), ln1_b=_param(np.zeros(dim)),
            qkv_w=_param(_trunc_normal(rng, (dim, 3 * dim))), qkv_b=_param(np.zeros(3 * dim)),
            o_w=_param(_trunc_normal(rng, (dim, dim))), o_b=_param(np.zeros(dim)),
            ls1=_param(np.full(dim, layerscale)),
            ln2_g=_param(np.ones(dim)), ln2_b=_param(np.zeros(dim)),
            fc1_w=_param(_trunc_normal(rng, (dim, hid))), fc1_b=_param(np.zeros(hid)),
            fc2_w=_param(_trunc_normal(rng, (hid, dim))), fc2_b=_param(np.zeros(dim)),
            ls2=_param(np.full(dim, layerscale)),
        )


@dataclass
class CanvasReadParams(ParamBundle):
    """Backbone queries canvas. Canvas-side key/value maps exist only in the QKVO ablation."""

    ln_q_g: Tensor
    ln_q_b: Tensor
    ln_kv_g: Tensor
    ln_kv_b: Tensor
    q_w: Tensor  # D_bb -> D_can
    q_b: Tensor
    o_w: Tensor  # D_can -> D_bb
    o_b: Tensor
    k_w: Tensor | None = None  # D_can -> D_can
    v_w: Tensor | None = None

    @classmethod
    def init(cls, rng, d_bb: int, d_can: int, canvas_qkvo: bool = False):
        p = cls(
            ln_q_g=_param(np.ones(d_bb)), ln_q_b=_param(np.zeros(d_bb)),
            ln_kv_g=_param(np.ones(d_can)), ln_kv_b=_param(np.zeros(d_can)),
            q_w=_param(_trunc_normal(rng, (d_bb, d_can))), q_b=_param(np.zeros(d_can)),
            o_w=_param(_trunc_normal(rng, (d_can, d_bb))), o_b=_param(np.zeros(d_bb)),
        )
        if canvas_qkvo:
            p.k_w = _param(_trunc_normal(rng, (d_can, d_can)))
            p.v_w = _param(_trunc_normal(rng, (d_can, d_can)))
        return p


@dataclass
class CanvasWriteParams(ParamBundle):
    """Canvas queries backbone. Canvas-side query/output maps exist only in the QKVO ablation."""

    ln_q_g: Tensor
    ln_q_b: Tensor
    ln_kv_g: Tensor
    ln_kv_b: Tensor
    k_w: Tensor  # D_bb -> D_can
    k_b: Tensor
    v_w: Tensor  # D_bb -> D_can
    v_b: Tensor
    q_w: Tensor | None = None  # D_can -> D_can
    o_w: Tensor | None = None

    @classmethod
    def init(cls, rng, d_bb: int, d_can: int, canvas_qkvo: bool = False):
        p = cls(
            ln_q_g=_param(np.ones(d_can)), ln_q_b=_param(np.zeros(d_can)),
            ln_kv_g=_param(np.ones(d_bb)), ln_kv_b=_param(np.zeros(d_bb)),
            k_w=_param(_trunc_normal(rng, (d_bb, d_can))), k_b=_param(np.zeros(d_can)),
            v_w=_param(_trunc_normal(rng, (d_bb, d_can))), v_b=_param(np.zeros(d_can)),
        )
        if canvas_qkvo:
            p.q_w = _param(_trunc_normal(rng, (d_can, d_can)))
            p.o_w = _param(_trunc_normal(rng, (d_can, d_can)))
        return p


# ---- blocks --------------------------------------------------------------------------


def mhsa(x: Tensor, p: ViTBlockParams, rope: RopeTable | None, heads: int) -> Tensor:
    d = x.shape[-1]
    qkv = tc.linear(x, p.qkv_w, p.qkv_b)
    q = to_multihead(qkv[..., :d], heads)
    k = to_multihead(qkv[..., d:2 * d], heads)
    v = to_multihead(qkv[..., 2 * d:], heads)
    if rope is not None:
        q, k = apply_2d_rope(q, rope), apply_2d_rope(k, rope)
    return tc.linear(from_multihead(tc.softmax_sdpa(q, k, v)), p.o_w, p.o_b)


def vit_block(x: Tensor, p: ViTBlockParams, rope: RopeTable | None, heads: int,
              rope_mask: np.ndarray | None = None) -> Tensor:
    """Pre-norm block: x + ls1*MHSA(LN(x)), then + ls2*MLP(LN(.)).

    If ``rope_mask`` is given, ``rope`` covers only the flagged tokens.
    """
    if rope is not None and rope_mask is not None:
        rope = rope_for_tokens(rope, rope_mask)
    h = tc.layer_norm(x, p.ln1_g, p.ln1_b)
    x = x + tc.mul(mhsa(h, p, rope, heads), p.ls1)
    h = tc.layer_norm(x, p.ln2_g, p.ln2_b)
    h = tc.linear(tc.gelu(tc.linear(h, p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b)
    return x + tc.mul(h, p.ls2)


def canvas_attention(x_q: Tensor, x_kv: Tensor, rope_q: RopeTable, rope_kv: RopeTable,
                     ln_q, ln_kv, q_map, k_map, v_map, o_map, heads: int) -> Tensor:
    """Shared Read/Write template. A map of None is the identity."""
    def apply(m, t):
        return t if m is None else tc.linear(t, *m)

    q = to_multihead(apply(q_map, tc.layer_norm(x_q, *ln_q)), heads)
    kv = tc.layer_norm(x_kv, *ln_kv)
    k = to_multihead(apply(k_map, kv), heads)
    v = to_multihead(apply(v_map, kv), heads)
    q = apply_2d_rope(q, rope_q)
    k = apply_2d_rope(k, rope_kv)
    return apply(o_map, from_multihead(tc.softmax_sdpa(q, k, v)))


def canvas_read(x_bb: Tensor, x_can: Tensor, rope_bb: RopeTable, rope_can: RopeTable,
                p: CanvasReadParams, heads: int) -> Tensor:
    """Residual for the backbone stream, shape of ``x_bb``."""
    return canvas_attention(
        x_bb, x_can, rope_bb, rope_can,
        (p.ln_q_g, p.ln_q_b), (p.ln_kv_g, p.ln_kv_b),
        (p.q_w, p.q_b), None if p.k_w is None else (p.k_w,),
        None if p.v_w is None else (p.v_w,), (p.o_w, p.o_b), heads)


def canvas_write(x_can: Tensor, x_bb: Tensor, rope_can: RopeTable, rope_bb: RopeTable,
                 p: CanvasWriteParams, heads: int) -> Tensor:
    """Residual for the canvas stream, shape of ``x_can``; no output projection."""
    return canvas_attention(
        x_can, x_bb, rope_can, rope_bb,
        (p.ln_q_g, p.ln_q_b), (p.ln_kv_g, p.ln_kv_b),
        None if p.q_w is None else (p.q_w,), (p.k_w, p.k_b), (p.v_w, p.v_b),
        None if p.o_w is None else (p.o_w,), heads)
