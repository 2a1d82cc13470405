"""Training objectives and their gradients.

Per-ray terms (color, Huber depth, scale-shift-aligned monocular depth) use
mean reduction over the batch so the loss weights stay batch-size
independent; depth terms skip rays whose ground-truth depth is invalid (0).
Plane regularizers (total variation on static planes, time smoothness on
dynamic planes, the L1 pull of dynamic values toward 1) reduce by the global
mean over all difference terms of the relevant field and accumulate their
scaled gradients straight into the plane grad buffers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import LossConfig
from .planes import PlaneSet


def rgb_loss(pred: np.ndarray, gt: np.ndarray):
    """Mean squared color error per ray; returns (value, d_pred)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    r = pred - gt
    n = len(pred)
    return float((r * r).sum() / n), 2.0 * r / n


def depth_loss(pred: np.ndarray, gt: np.ndarray, delta: float,
               valid: np.ndarray | None = None):
    """Mean Huber depth error over valid rays; returns (value, d_pred)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if valid is None:
        valid = gt > 0
    n = int(valid.sum())
    grad = np.zeros_like(pred)
    if n == 0:
        return 0.0, grad
    r = np.where(valid, pred - gt, 0.0)
    small = np.abs(r) <= delta
    per = np.where(small, 0.5 * r * r, delta * (np.abs(r) - 0.5 * delta))
    grad_valid = np.where(small, r, delta * np.sign(r)) / n
    grad[valid] = grad_valid[valid]
    return float(per[valid].sum() / n), grad


def _tv_count(planes: PlaneSet) -> int:
    c = 0
    for g in planes.static_grids():
        ra, rb, d = g.values.shape
        c += ((ra - 1) * rb + ra * (rb - 1)) * d
    return c


def tv_loss(planes: PlaneSet, grad_scale: float = 0.0) -> float:
    """Mean squared neighbour difference over static planes, both axes.

    If grad_scale is nonzero, grad_scale * d(loss)/d(values) is accumulated
    into each static plane's grad buffer.
    """
    count = _tv_count(planes)
    total = 0.0
    for g in planes.static_grids():
        v = g.values.astype(np.float64, copy=False)
        dh = v[1:, :, :] - v[:-1, :, :]
        dw = v[:, 1:, :] - v[:, :-1, :]
        total += float((dh * dh).sum() + (dw * dw).sum())
        if grad_scale:
            s = 2.0 * grad_scale / count
            g.grad[1:, :, :] += (s * dh).astype(g.grad.dtype)
            g.grad[:-1, :, :] -= (s * dh).astype(g.grad.dtype)
            g.grad[:, 1:, :] += (s * dw).astype(g.grad.dtype)
            g.grad[:, :-1, :] -= (s * dw).astype(g.grad.dtype)
    return total / count


def _ts_count(planes: PlaneSet) -> int:
    c = 0
    for g in planes.dynamic_grids():
        ra, rb, d = g.values.shape
        c += ra * (rb - 1) * d
    return c


def time_smoothness_loss(planes: PlaneSet, grad_scale: float = 0.0) -> float:
    """Mean squared difference along the time axis of dynamic planes."""
    count = _ts_count(planes)
    total = 0.0
    for g in planes.dynamic_grids():
        v = g.values.astype(np.float64, copy=False)
        dt = v[:, 1:, :] - v[:, :-1, :]
        total += float((dt * dt).sum())
        if grad_scale:
            s = 2.0 * grad_scale / count
            g.grad[:, 1:, :] += (s * dt).astype(g.grad.dtype)
            g.grad[:, :-1, :] -= (s * dt).astype(g.grad.dtype)
    return total / count


def disentangle_loss(planes: PlaneSet, grad_scale: float = 0.0) -> float:
    """Mean |1 - g| over dynamic-plane entries; subgradient sign(g - 1)."""
    count = sum(g.values.size for g in planes.dynamic_grids())
    total = 0.0
    for g in planes.dynamic_grids():
        v = g.values.astype(np.float64, copy=False)
        total += float(np.abs(1.0 - v).sum())
        if grad_scale:
            g.grad += (grad_scale / count * np.sign(v - 1.0)).astype(g.grad.dtype)
    return total / count


@dataclass
class MonoAlignment:
    eta: float
    eps: float
    degenerate: bool = False


def mono_align(pred: np.ndarray, mono: np.ndarray) -> MonoAlignment:
    """Closed-form least-squares (eta, eps) minimizing ||eta*pred + eps - mono||^2.

    A constant pred has no defined scale: eta = 0, eps = mean(mono), flagged.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    mono = np.asarray(mono, dtype=np.float64).reshape(-1)
    if len(pred) < 2:
        raise ValueError("mono alignment needs at least 2 rays")
    pm = pred.mean()
    var = float(((pred - pm) ** 2).sum())
    if var == 0.0:
        return MonoAlignment(0.0, float(mono.mean()), degenerate=True)
    eta = float(((pred - pm) * (mono - mono.mean())).sum() / var)
    eps = float(mono.mean() - eta * pm)
    return MonoAlignment(eta, eps)


def mono_loss(pred: np.ndarray, mono: np.ndarray,
              valid: np.ndarray | None = None):
    """Mean squared residual after scale-shift alignment.

    (eta, eps) are held at their closed-form values during backprop; at the
    least-squares optimum the omitted terms vanish to first order.
    Returns (value, d_pred, MonoAlignment).
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    mono = np.asarray(mono, dtype=np.float64).reshape(-1)
    if valid is None:
        valid = mono > 0
    n = int(valid.sum())
    grad = np.zeros_like(pred)
    if n < 2:
        return 0.0, grad, MonoAlignment(0.0, 0.0, degenerate=True)
    a = mono_align(pred[valid], mono[valid])
    r = a.eta * pred[valid] + a.eps - mono[valid]
    grad[valid] = 2.0 * a.eta * r / n
    return float((r * r).sum() / n), grad, a


def regularizer_losses(planes: PlaneSet, weights: LossConfig,
                       with_grads: bool = False):
    """(tv, ts, de) values; optionally accumulate lambda-scaled grads."""
    tv = tv_loss(planes, grad_scale=weights.lambda_tv if with_grads else 0.0)
    ts = time_smoothness_loss(planes, grad_scale=weights.lambda_ts if with_grads else 0.0)
    de = disentangle_loss(planes, grad_scale=weights.lambda_de if with_grads else 0.0)
    return tv, ts, de


def combine_terms(terms: dict[str, float], weights: LossConfig) -> float:
    """Weighted total: rgb + lambda_d * depth-term + regularizers."""
    total = terms.get("rgb", 0.0)
    if weights.depth_mode == "stereo":
        total += weights.lambda_d * terms.get("depth", 0.0)
    elif weights.depth_mode == "monocular":
        total += weights.lambda_d * terms.get("mono", 0.0)
    total += weights.lambda_tv * terms.get("tv", 0.0)
    total += weights.lambda_ts * terms.get("ts", 0.0)
    total += weights.lambda_de * terms.get("de", 0.0)
    return total
