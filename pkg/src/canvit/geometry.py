"""Scene coordinates, viewpoints and the scale-invariant viewpoint embedding.

The scene spans [-1, +1]^2. A viewpoint (x, y, s) looks at the square crop
[x - s, x + s] x [y - s, y + s]; s is the half-side length. Grid centers are
returned as (y, x) pairs, row-major, with row 0 at y = -1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

VALID_EPS = 1e-9


class InvalidViewpoint(ValueError):
    pass


@dataclass(frozen=True)
class Viewpoint:
    x: float
    y: float
    s: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.s)


FULL_SCENE = Viewpoint(0.0, 0.0, 1.0)


@dataclass(frozen=True)
class VpeTriplet:
    u1: float
    u2: float
    u3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.u1, self.u2, self.u3], dtype=np.float64)

    def inverse(self) -> Viewpoint:
        s = math.exp(self.u3)
        return Viewpoint(s * self.u1, s * self.u2, s)


def is_valid(v: Viewpoint) -> bool:
    x, y, s = v.x, v.y, v.s
    if not all(math.isfinite(c) for c in (x, y, s)):
        return False
    if s <= 0 or s > 1 + VALID_EPS:
        return False
    return abs(x) <= 1 - s + VALID_EPS and abs(y) <= 1 - s + VALID_EPS


def check_valid(v: Viewpoint) -> None:
    if not is_valid(v):
        raise InvalidViewpoint(f"viewpoint {v} does not lie inside the scene")


def embed_viewpoint(v: Viewpoint) -> VpeTriplet:
    check_valid(v)
    return VpeTriplet(v.x / v.s, v.y / v.s, math.log(v.s))


def embed_viewpoints(xys: np.ndarray) -> np.ndarray:
    """Vectorized ``embed_viewpoint`` for an ``[..., 3]`` array of (x, y, s); no validity check."""
    xys = np.asarray(xys, dtype=np.float64)
    s = xys[..., 2]
    return np.stack([xys[..., 0] / s, xys[..., 1] / s, np.log(s)], axis=-1)


def grid_centers(rows: int, cols: int) -> np.ndarray:
    """Cell centers of a uniform rows x cols grid over [-1, 1]^2, shape [rows*cols, 2] as (y, x)."""
    if rows < 1 or cols < 1:
        raise ValueError(f"grid needs positive dimensions, got {rows}x{cols}")
    ys = (np.arange(rows) + 0.5) / rows * 2 - 1
    xs = (np.arange(cols) + 0.5) / cols * 2 - 1
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy, xx], axis=-1).reshape(rows * cols, 2)


def glimpse_patch_centers(v: Viewpoint, rows: int, cols: int) -> np.ndarray:
    check_valid(v)
    return np.array([v.y, v.x]) + v.s * grid_centers(rows, cols)


def glimpse_patch_centers_batch(xys: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """``[B, 3]`` viewpoints -> ``[B, rows*cols, 2]`` (y, x) patch centers."""
    xys = np.asarray(xys, dtype=np.float64)
    center = xys[:, [1, 0]][:, None, :]
    return center + xys[:, 2, None, None] * grid_centers(rows, cols)[None]


@dataclass
class RffParams:
    """Frozen random Fourier feature frequencies, ``B`` has shape [n_features, 3]."""

    B: np.ndarray

    @property
    def n_features(self) -> int:
        return self.B.shape[0]

    @property
    def out_dim(self) -> int:
        return 2 * self.n_features

    @classmethod
    def sample(cls, rng: np.random.Generator, out_dim: int, sigma: float = 1.0) -> "RffParams":
        if out_dim % 2:
            raise ValueError("RFF output dimension must be even")
        return cls(rng.normal(0.0, sigma, size=(out_dim // 2, 3)))


def lift_rff(u, params: RffParams, out_dim: int | None = None) -> np.ndarray:
    """[cos(Bu); sin(Bu)] * sqrt(2 / n_features). Accepts a VpeTriplet or an ``[..., 3]`` array."""
    if out_dim is not None and out_dim != params.out_dim:
        raise ValueError(f"RFF params give dim {params.out_dim}, expected {out_dim}")
    u = u.as_array() if isinstance(u, VpeTriplet) else np.asarray(u, dtype=np.float64)
    phase = u @ params.B.T
    return np.concatenate([np.cos(phase), np.sin(phase)], axis=-1) * math.sqrt(2.0 / params.n_features)
