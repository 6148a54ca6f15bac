"""Viewing policies (R-IID, F-IID, C2F, F2C, EG-C2F, RFS) and rollout-length sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import FULL_SCENE, Viewpoint

S_MIN = 0.05
POLICY_NAMES = ("r-iid", "f-iid", "c2f", "f2c", "eg-c2f", "rfs")


class PolicyExhausted(RuntimeError):
    pass


def sample_iid_viewpoints(rng: np.random.Generator, n: int, s_min: float = S_MIN) -> np.ndarray:
    """``n`` i.i.d. viewpoints as an [n, 3] array of (x, y, s).

    Area-like variable A ~ U[0, (1 - s_min)^2], s = 1 - sqrt(A), center uniform on
    the box of half-side sqrt(A). The induced scale density is p(s) ∝ 1 - s.
    """
    if not 0 < s_min < 1:
        raise ValueError("s_min must lie in (0, 1)")
    a = rng.uniform(0.0, (1.0 - s_min) ** 2, size=n)
    r = np.sqrt(a)
    x = rng.uniform(-1.0, 1.0, size=n) * r
    y = rng.uniform(-1.0, 1.0, size=n) * r
    return np.stack([x, y, 1.0 - r], axis=-1)


def sample_iid_viewpoint(rng: np.random.Generator, s_min: float = S_MIN) -> Viewpoint:
    return Viewpoint(*sample_iid_viewpoints(rng, 1, s_min)[0])


def iid_scale_cdf(s, s_min: float = S_MIN):
    """CDF of the i.i.d. scale marginal on [s_min, 1]: 1 - ((1 - s) / (1 - s_min))^2."""
    s = np.clip(s, s_min, 1.0)
    return 1.0 - ((1.0 - s) / (1.0 - s_min)) ** 2


def r_iid_sequence(rng, T: int, s_min: float = S_MIN) -> list[Viewpoint]:
    if T < 1:
        raise ValueError("T must be >= 1")
    return [Viewpoint(*row) for row in sample_iid_viewpoints(rng, T, s_min)]


def f_iid_sequence(rng, T: int, s_min: float = S_MIN) -> list[Viewpoint]:
    if T < 1:
        raise ValueError("T must be >= 1")
    return [FULL_SCENE] + [Viewpoint(*row) for row in sample_iid_viewpoints(rng, T - 1, s_min)]


def rfs_sequence(T: int) -> list[Viewpoint]:
    if T < 1:
        raise ValueError("T must be >= 1")
    return [FULL_SCENE] * T


def quadtree_level(level: int) -> list[Viewpoint]:
    """The 2^l x 2^l non-overlapping tiles of scale 2^-l, row-major (rows run along y)."""
    n = 2 ** level
    s = 1.0 / n
    centers = -1.0 + s * (2 * np.arange(n) + 1)
    return [Viewpoint(float(cx), float(cy), s) for cy in centers for cx in centers]


def c2f_sequence(rng, T: int) -> list[Viewpoint]:
    if T < 1:
        raise ValueError("T must be >= 1")
    seq: list[Viewpoint] = []
    level = 0
    while len(seq) < T:
        tiles = quadtree_level(level)
        seq.extend(tiles[i] for i in rng.permutation(len(tiles)))
        level += 1
    return seq[:T]


def f2c_sequence(rng, T: int) -> list[Viewpoint]:
    return c2f_sequence(rng, T)[::-1]


def sample_rollout_length(rng, K: int, p_stop: float, size=None):
    """K times a Geometric(p_stop) chunk count (support starts at 1 chunk)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0 < p_stop <= 1:
        raise ValueError("p_stop must lie in (0, 1]")
    return K * rng.geometric(p_stop, size=size)


# ---- entropy-guided coarse-to-fine ---------------------------------------------------


def entropy_from_logits(logits: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of softmax over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -(np.exp(logp) * logp).sum(axis=-1)


def _overlap(lo: np.ndarray, hi: np.ndarray, a: float, b: float) -> np.ndarray:
    return np.clip(np.minimum(hi, b) - np.maximum(lo, a), 0.0, None)


def tile_mean_entropy(tile: Viewpoint, entropy_map: np.ndarray) -> float:
    """Area-weighted mean of an [H, W] entropy map over the canvas cells a tile covers."""
    H, W = entropy_map.shape
    ey = -1 + 2 * np.arange(H + 1) / H
    ex = -1 + 2 * np.arange(W + 1) / W
    wy = _overlap(ey[:-1], ey[1:], tile.y - tile.s, tile.y + tile.s)
    wx = _overlap(ex[:-1], ex[1:], tile.x - tile.s, tile.x + tile.s)
    w = wy[:, None] * wx[None, :]
    return float((w * entropy_map).sum() / w.sum())


def eg_c2f_next(level_tiles: list[Viewpoint], visited: set[int], entropy_map: np.ndarray) -> int:
    """Index of the unvisited tile with highest mean entropy; ties go to the lowest index."""
    candidates = [i for i in range(len(level_tiles)) if i not in visited]
    if not candidates:
        raise PolicyExhausted("all tiles of this level were visited")
    scores = np.array([tile_mean_entropy(level_tiles[i], entropy_map) for i in candidates])
    best = scores.max()
    tol = 1e-12 * max(1.0, abs(best))
    return candidates[int(np.flatnonzero(scores >= best - tol)[0])]


# ---- policy objects used by rollouts -------------------------------------------------


class Policy:
    """Emits a [B, 3] viewpoint array per timestep."""

    def reset(self, batch: int):
        self.batch = batch

    def next(self, t: int, **ctx) -> np.ndarray:
        raise NotImplementedError


class SequencePolicy(Policy):
    """Draws one precomputed sequence per batch element at reset."""

    def __init__(self, make_sequence: Callable[[], list[Viewpoint]]):
        self.make_sequence = make_sequence
        self.seqs: list[list[Viewpoint]] = []

    def reset(self, batch: int):
        super().reset(batch)
        self.seqs = [self.make_sequence() for _ in range(batch)]

    def next(self, t: int, **ctx) -> np.ndarray:
        if any(t >= len(s) for s in self.seqs):
            raise PolicyExhausted(f"policy sequence ended before t={t}")
        return np.array([s[t].as_tuple() for s in self.seqs])


@dataclass
class LinearProbe:
    """Token-wise linear classifier on LayerNorm'd canvas patches."""

    w: np.ndarray  # [D_can, n_classes]
    b: np.ndarray

    @classmethod
    def random(cls, rng, d_can: int, n_classes: int = 8, std: float = 1.0):
        return cls(rng.normal(0.0, std / math.sqrt(d_can), size=(d_can, n_classes)), np.zeros(n_classes))

    def logits(self, canvas_patches: np.ndarray) -> np.ndarray:
        x = canvas_patches - canvas_patches.mean(-1, keepdims=True)
        x = x / np.sqrt((x * x).mean(-1, keepdims=True) + 1e-6)
        return x @ self.w + self.b


class EntropyGuidedC2F(Policy):
    """C2F where tiles within a level are visited greedily by current probe entropy."""

    def __init__(self, probe: LinearProbe):
        self.probe = probe

    def reset(self, batch: int):
        super().reset(batch)
        self.level = 0
        self.visited: list[set[int]] = [set() for _ in range(batch)]

    def next(self, t: int, state=None, **ctx) -> np.ndarray:
        tiles = quadtree_level(self.level)
        if all(len(v) == len(tiles) for v in self.visited):
            self.level += 1
            tiles = quadtree_level(self.level)
            self.visited = [set() for _ in range(self.batch)]
        if len(tiles) == 1:
            self.visited = [{0} for _ in range(self.batch)]
            return np.tile(np.array(tiles[0].as_tuple()), (self.batch, 1))
        if state is None:
            raise ValueError("EG-C2F needs the current model state")
        ent = entropy_from_logits(self.probe.logits(state.patches_grid()))
        out = []
        for b in range(self.batch):
            i = eg_c2f_next(tiles, self.visited[b], ent[b])
            self.visited[b].add(i)
            out.append(tiles[i].as_tuple())
        return np.array(out)


def make_policy(name: str, rng: np.random.Generator, T: int, s_min: float = S_MIN,
                probe: LinearProbe | None = None) -> Policy:
    name = name.lower()
    if name == "r-iid":
        return SequencePolicy(lambda: r_iid_sequence(rng, T, s_min))
    if name == "f-iid":
        return SequencePolicy(lambda: f_iid_sequence(rng, T, s_min))
    if name == "c2f":
        return SequencePolicy(lambda: c2f_sequence(rng, T))
    if name == "f2c":
        return SequencePolicy(lambda: f2c_sequence(rng, T))
    if name == "rfs":
        return SequencePolicy(lambda: rfs_sequence(T))
    if name == "eg-c2f":
        if probe is None:
            raise ValueError("eg-c2f needs a probe")
        return EntropyGuidedC2F(probe)
    raise ValueError(f"unknown policy {name!r}; choose from {', '.join(POLICY_NAMES)}")
