"""Spatiotemporal importance sampling of training pixels.

Per-frame weight maps combine two signals: an occlusion scaling that boosts
tissue pixels hidden behind the tool in many frames,

    Omega_i = beta * T * M_i / max(sum_j M_j, 1),

and a temporal-difference term, the max over a window of neighbouring frames
of the channel-mean absolute difference of tool-masked images, floored at
alpha so unchanged pixels keep nonzero weight:

    W_i = max(diff_i, alpha) * Omega_i.

Tool pixels (M_i = 0) always get weight 0. Ray batches are drawn i.i.d. by
inverse CDF over the flattened (frame, pixel) weights. The naive and
occlusion-only variants are the two ablation baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SamplerConfig
from .errors import DataError


@dataclass
class WeightMaps:
    weights: np.ndarray  # (T, H, W), non-negative
    cdf: np.ndarray  # flat cumulative distribution over (frame, pixel)
    alpha: float
    beta: float
    window: int

    @property
    def shape(self):
        return self.weights.shape

    def probabilities(self) -> np.ndarray:
        return self.weights / self.weights.sum()


def _finalize(weights: np.ndarray, alpha: float, beta: float, window: int) -> WeightMaps:
    total = weights.sum()
    if total <= 0:
        raise DataError("every pixel is tool-occluded in every frame; "
                        "no rays can be sampled")
    cdf = np.cumsum(weights.reshape(-1)) / total
    return WeightMaps(weights, cdf, alpha, beta, window)


def occlusion_scaling(masks: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """Omega maps (T, H, W); pixels visible in few frames scale up."""
    masks = np.asarray(masks, dtype=np.float64)
    T = masks.shape[0]
    visible = masks.sum(axis=0)
    return beta * T * masks / np.maximum(visible, 1.0)[None, :, :]


def temporal_difference(images: np.ndarray, masks: np.ndarray, frame: int,
                        window: int) -> np.ndarray:
    """Max channel-mean |I_i M_i - I_j M_j| over frames i-n < j < i+n."""
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    T = images.shape[0]
    ref = images[frame] * masks[frame][..., None]
    out = np.zeros(images.shape[1:3])
    for j in range(max(0, frame - window + 1), min(T, frame + window)):
        if j == frame:
            continue
        diff = np.abs(ref - images[j] * masks[j][..., None]).mean(axis=2)
        np.maximum(out, diff, out=out)
    return out


def build_weight_maps(images: np.ndarray, masks: np.ndarray,
                      cfg: SamplerConfig) -> WeightMaps:
    """Full spatiotemporal maps: W_i = max(diff_i, alpha) * Omega_i."""
    omega = occlusion_scaling(masks, cfg.beta)
    w = np.empty_like(omega)
    for i in range(len(images)):
        diff = temporal_difference(images, masks, i, cfg.window)
        w[i] = np.maximum(diff, cfg.alpha) * omega[i]
    return _finalize(w, cfg.alpha, cfg.beta, cfg.window)


def naive_weight_maps(masks: np.ndarray) -> WeightMaps:
    """Uniform over tissue pixels (ablation baseline)."""
    w = np.asarray(masks, dtype=np.float64).copy()
    return _finalize(w, 1.0, 1.0, 1)


def endonerf_weight_maps(masks: np.ndarray, beta: float = 1.0) -> WeightMaps:
    """Occlusion scaling alone, no temporal term (ablation baseline)."""
    return _finalize(occlusion_scaling(masks, beta), 1.0, beta, 1)


def weight_maps_for(images, masks, cfg: SamplerConfig) -> WeightMaps:
    if cfg.kind == "spatiotemporal":
        return build_weight_maps(images, masks, cfg)
    if cfg.kind == "naive":
        return naive_weight_maps(masks)
    if cfg.kind == "endonerf":
        return endonerf_weight_maps(masks, cfg.beta)
    raise ValueError(f"unknown sampler kind {cfg.kind!r}")


def draw_batch(wm: WeightMaps, rng: np.random.Generator, batch_size: int):
    """i.i.d. inverse-CDF draws; returns (frame, row, col) index arrays.

    Zero-weight pixels are plateaus in the CDF and can never be selected.
    """
    u = rng.random(batch_size)
    flat = np.searchsorted(wm.cdf, u, side="right")
    T, H, W = wm.weights.shape
    frame, rest = np.divmod(flat, H * W)
    row, col = np.divmod(rest, W)
    return frame, row, col
