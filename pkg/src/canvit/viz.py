"""PCA false-color maps of token grids and cosine-dissimilarity change maps."""

from __future__ import annotations

import numpy as np

from .scene import write_ppm


def _layer_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = x - x.mean(-1, keepdims=True)
    return x / np.sqrt((x * x).mean(-1, keepdims=True) + eps)


def pca_basis(tokens: np.ndarray, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` principal directions [D, k] and eigenvalues of the token covariance.

    Directions with (relatively) vanishing variance are returned as zero columns.
    """
    x = tokens - tokens.mean(0)
    cov = x.T @ x / max(len(x) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    evals, evecs = evals[order], evecs[:, order]
    keep = evals > 1e-9 * max(float(evals.max(initial=0.0)), 1e-300)
    evecs = np.where(keep[None], evecs, 0.0)
    evals = np.where(keep, evals, 0.0)
    if evecs.shape[1] < k:
        pad = k - evecs.shape[1]
        evecs = np.pad(evecs, ((0, 0), (0, pad)))
        evals = np.pad(evals, (0, pad))
    # fix the sign so the largest-magnitude loading is positive
    for j in range(k):
        i = np.argmax(np.abs(evecs[:, j]))
        if evecs[i, j] < 0:
            evecs[:, j] *= -1
    return evecs, evals


def _minmax(img: np.ndarray) -> np.ndarray:
    lo = img.min(axis=(0, 1), keepdims=True)
    span = img.max(axis=(0, 1), keepdims=True) - lo
    return np.where(span > 0, (img - lo) / np.where(span > 0, span, 1.0), 0.0)


def pca_visualize(tokens: np.ndarray, grid: tuple[int, int] | None = None, out=None) -> np.ndarray:
    """Layer-normalize tokens, project on PCs 1-3, min-max each channel -> [H, W, 3] in [0, 1]."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim == 3:
        grid = grid or tokens.shape[:2]
        tokens = tokens.reshape(-1, tokens.shape[-1])
    n = len(tokens)
    if n < 3:
        raise ValueError("need at least 3 tokens")
    if grid is None:
        side = int(round(np.sqrt(n)))
        if side * side != n:
            raise ValueError(f"{n} tokens do not form a square grid; pass grid")
        grid = (side, side)
    x = _layer_norm(tokens)
    basis, _ = pca_basis(x, 3)
    img = _minmax(((x - x.mean(0)) @ basis).reshape(*grid, 3))
    if out is not None:
        write_ppm(out, img)
    return img


def cosine_dissimilarity(prev: np.ndarray, cur: np.ndarray) -> np.ndarray:
    """1 - cos between layer-normalized tokens of two [H, W, D] canvases -> [H, W] in [0, 2]."""
    a, b = _layer_norm(np.asarray(prev, dtype=np.float64)), _layer_norm(np.asarray(cur, dtype=np.float64))
    num = (a * b).sum(-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return 1.0 - np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)


def save_heatmap(path, values: np.ndarray, vmax: float | None = None):
    """Grayscale PPM; ``vmax`` fixes the scale (default: the map's own maximum)."""
    vmax = float(values.max()) if vmax is None else vmax
    write_ppm(path, np.clip(values / vmax, 0, 1) if vmax > 0 else np.zeros_like(values))
