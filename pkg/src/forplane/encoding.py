"""Coordinate-time encodings fed to the decoder alongside fused plane features.

Default is one-blob: each of the four normalized coordinates is mapped to k
Gaussian-kernel responses at fixed bin centers (i + 0.5)/k, using the
unnormalized kernel exp(-(c - s)^2 / (2 sigma^2)) so the peak value is 1.
Frequency encoding (sin/cos octaves) exists for the direction-encoding
ablation; dummy replaces the encoded block with a constant 0.5 while keeping
the input width.
"""

from __future__ import annotations

import numpy as np

from .config import EncodingConfig


def oneblob_centers(bins: int) -> np.ndarray:
    return (np.arange(bins, dtype=np.float64) + 0.5) / bins


def oneblob_encode(s, bins: int, sigma: float) -> np.ndarray:
    """Encode scalars in [0, 1] (clamped) as k Gaussian bin responses."""
    s = np.clip(np.asarray(s, dtype=np.float64), 0.0, 1.0)
    centers = oneblob_centers(bins)
    d = centers - s[..., None]
    return np.exp(-(d * d) / (2.0 * sigma * sigma))


def frequency_encode(s, octaves: int) -> np.ndarray:
    """[sin(2^0 s), cos(2^0 s), ..., sin(2^(L-1) s), cos(2^(L-1) s)]."""
    s = np.asarray(s, dtype=np.float64)
    out = np.empty(s.shape + (2 * octaves,), dtype=np.float64)
    for o in range(octaves):
        arg = (2.0 ** o) * s
        out[..., 2 * o] = np.sin(arg)
        out[..., 2 * o + 1] = np.cos(arg)
    return out


def encoding_width(cfg: EncodingConfig) -> int:
    """Width of the encoded block prepended to the fused feature."""
    if cfg.kind in ("oneblob", "dummy"):
        return 4 * cfg.bins
    return 6 * cfg.octaves  # frequency encoding of the 3 direction components


def encode_points(points: np.ndarray, cfg: EncodingConfig,
                  directions: np.ndarray | None = None,
                  dtype=np.float64) -> np.ndarray:
    """Encode (n, 4) sample coordinates (x, y, z, t), in that fixed order.

    kind=dummy keeps the one-blob width but fills it with 0.5; kind=frequency
    encodes the per-sample view direction instead of the coordinates and
    requires `directions` (n, 3).
    """
    points = np.asarray(points)
    if points.ndim == 1:
        points = points[None, :]
    n = points.shape[0]
    if cfg.kind == "oneblob":
        enc = oneblob_encode(points, cfg.bins, cfg.sigma).reshape(n, 4 * cfg.bins)
    elif cfg.kind == "dummy":
        enc = np.full((n, 4 * cfg.bins), 0.5, dtype=np.float64)
    elif cfg.kind == "frequency":
        if directions is None:
            raise ValueError("frequency encoding needs per-sample view directions")
        enc = frequency_encode(np.asarray(directions), cfg.octaves).reshape(n, 6 * cfg.octaves)
    else:
        raise ValueError(f"unknown encoding kind {cfg.kind!r}")
    return enc.astype(dtype, copy=False)
