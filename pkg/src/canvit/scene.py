"""Scenes as pixel grids over [-1, 1]^2, PPM/PFM file IO and glimpse extraction.

Pixel (r, c) of an S x S scene has its center at y = (r + 0.5) / S * 2 - 1,
x = (c + 0.5) / S * 2 - 1, so row 0 is the y = -1 edge.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import tensorcore as tc


class SceneFormatError(ValueError):
    pass


@dataclass
class Scene:
    pixels: np.ndarray  # [S, S, 3] in [0, 1]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise SceneFormatError(f"scene must be S x S x 3, got {px.shape}")
        if px.shape[0] != px.shape[1]:
            raise SceneFormatError(f"scene must be square, got {px.shape[0]}x{px.shape[1]}")
        if not np.isfinite(px).all():
            raise SceneFormatError("scene has non-finite values")
        self.pixels = px

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    def __call__(self, x: float, y: float) -> np.ndarray:
        """Bilinear sample of the scene function at scene coordinates (x, y)."""
        return _sample(self.pixels[None], np.array([[y]]), np.array([[x]]))[0, 0]


# ---- file formats --------------------------------------------------------------------


def _read_tokens(buf: bytes, n: int) -> tuple[list[bytes], int]:
    toks, pos = [], 0
    while len(toks) < n:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SceneFormatError("truncated header")
        toks.append(buf[start:pos])
    return toks, pos + 1


def read_ppm(path) -> np.ndarray:
    """Binary P6 with maxval 255 -> float array in [0, 1] (any aspect ratio)."""
    buf = Path(path).read_bytes()
    try:
        toks, pos = _read_tokens(buf, 4)
        if toks[0] != b"P6":
            raise SceneFormatError(f"not a binary PPM (magic {toks[0]!r})")
        w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    except (ValueError, IndexError) as e:
        raise SceneFormatError(f"malformed PPM header: {e}") from e
    if maxval != 255:
        raise SceneFormatError(f"only maxval 255 supported, got {maxval}")
    if len(buf) - pos < w * h * 3:
        raise SceneFormatError("PPM payload truncated")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_ppm(path, pixels: np.ndarray):
    px = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    if px.ndim == 2:
        px = np.repeat(px[..., None], 3, axis=-1)
    h, w, _ = px.shape
    data = np.round(px * 255.0).astype(np.uint8)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_pfm(path) -> np.ndarray:
    """Color PFM (``PF``): float32 rows stored bottom-to-top."""
    buf = Path(path).read_bytes()
    toks, pos = _read_tokens(buf, 4)
    if toks[0] != b"PF":
        raise SceneFormatError(f"not a color PFM (magic {toks[0]!r})")
    w, h, sc = int(toks[1]), int(toks[2]), float(toks[3])
    dt = "<f4" if sc < 0 else ">f4"
    if len(buf) - pos < w * h * 12:
        raise SceneFormatError("PFM payload truncated")
    data = np.frombuffer(buf, dtype=dt, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return data[::-1].astype(np.float64)


def write_pfm(path, pixels: np.ndarray):
    px = np.asarray(pixels, dtype="<f4")
    h, w, _ = px.shape
    Path(path).write_bytes(b"PF\n%d %d\n-1.0\n" % (w, h) + np.ascontiguousarray(px[::-1]).tobytes())


def load_scene(path) -> Scene:
    path = Path(path)
    head = path.read_bytes()[:2]
    if head == b"P6":
        px = read_ppm(path)
    elif head == b"PF":
        px = np.clip(read_pfm(path), 0.0, 1.0)
    else:
        raise SceneFormatError(f"{path}: unsupported scene format")
    return Scene(px)


def save_scene(path, scene: Scene):
    path = Path(path)
    if path.suffix == ".pfm":
        write_pfm(path, scene.pixels)
    else:
        write_ppm(path, scene.pixels)


# ---- glimpse extraction --------------------------------------------------------------


def _axis_coords(centers: np.ndarray, scales: np.ndarray, side: int, out_px: int):
    """Bilinear source indices/weights along one axis, each [B, out_px]."""
    rel = (np.arange(out_px) + 0.5) / out_px * 2 - 1
    coord = centers[:, None] + scales[:, None] * rel[None]
    pix = np.clip((coord + 1) / 2 * side - 0.5, 0.0, side - 1)
    i0 = np.floor(pix).astype(np.int64)
    i1 = np.minimum(i0 + 1, side - 1)
    return i0, i1, pix - i0


def _sample(scenes: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear point samples; ``ys``/``xs`` are [B, N] scene coordinates -> [B, N, 3]."""
    side = scenes.shape[1]
    py = np.clip((ys + 1) / 2 * side - 0.5, 0.0, side - 1)
    px = np.clip((xs + 1) / 2 * side - 0.5, 0.0, side - 1)
    y0, x0 = np.floor(py).astype(np.int64), np.floor(px).astype(np.int64)
    y1, x1 = np.minimum(y0 + 1, side - 1), np.minimum(x0 + 1, side - 1)
    wy, wx = (py - y0)[..., None], (px - x0)[..., None]
    b = np.arange(scenes.shape[0])[:, None]
    top = (1 - wx) * scenes[b, y0, x0] + wx * scenes[b, y0, x1]
    bot = (1 - wx) * scenes[b, y1, x0] + wx * scenes[b, y1, x1]
    return (1 - wy) * top + wy * bot


def extract_glimpses(scenes: np.ndarray, viewpoints: np.ndarray, out_px: int) -> np.ndarray:
    """Batched, non-differentiable crop-and-resize: [B, S, S, 3] x [B, 3] -> [B, out, out, 3]."""
    scenes = np.asarray(scenes, dtype=np.float64)
    side = scenes.shape[1]
    vps = np.asarray(viewpoints, dtype=np.float64).reshape(-1, 3)
    y0, y1, wy = _axis_coords(vps[:, 1], vps[:, 2], side, out_px)
    x0, x1, wx = _axis_coords(vps[:, 0], vps[:, 2], side, out_px)
    b = np.arange(scenes.shape[0])[:, None, None]
    Y0, Y1 = y0[:, :, None], y1[:, :, None]
    X0, X1 = x0[:, None, :], x1[:, None, :]
    WY, WX = wy[:, :, None, None], wx[:, None, :, None]
    top = (1 - WX) * scenes[b, Y0, X0] + WX * scenes[b, Y0, X1]
    bot = (1 - WX) * scenes[b, Y1, X0] + WX * scenes[b, Y1, X1]
    return (1 - WY) * top + WY * bot


def extract_glimpse(scene, v: geo.Viewpoint, out_px: int) -> tc.Tensor:
    """Differentiable crop [x-s, x+s] x [y-s, y+s] resampled to out_px^2 (bilinear).

    ``scene`` is a Scene, an [S, S, 3] array, or a Tensor (gradients flow to its pixels).
    """
    geo.check_valid(v)
    if isinstance(scene, Scene):
        scene = scene.pixels
    scene = tc.as_tensor(scene)
    side = scene.shape[0]
    vp = np.array([[v.x, v.y, v.s]])
    y0, y1, wy = (a[0] for a in _axis_coords(vp[:, 1], vp[:, 2], side, out_px))
    x0, x1, wx = (a[0] for a in _axis_coords(vp[:, 0], vp[:, 2], side, out_px))
    flat = scene.reshape(side * side, 3)

    def corner(yi, xi, w):
        idx = yi[:, None] * side + xi[None, :]
        return tc.mul(tc.gather(flat, idx, axis=0), w[..., None])

    return (corner(y0, x0, (1 - wy)[:, None] * (1 - wx)[None])
            + corner(y0, x1, (1 - wy)[:, None] * wx[None])
            + corner(y1, x0, wy[:, None] * (1 - wx)[None])
            + corner(y1, x1, wy[:, None] * wx[None]))
