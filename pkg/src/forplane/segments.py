"""Per-ray reductions over packed sample arrays.

A batch of rays with variable surviving-sample counts is stored packed: one
flat array of samples plus a sorted `ray_ids` array mapping each sample to
its ray. These helpers give the segment-wise cumulative sums the compositor
needs without per-ray Python loops. Sums run in float64 regardless of input
dtype so long rays do not lose precision.
"""

from __future__ import annotations

import numpy as np


def exclusive_cumsum(x: np.ndarray, ray_ids: np.ndarray) -> np.ndarray:
    """Within-segment exclusive prefix sum; ray_ids must be sorted."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    cs = np.cumsum(x)
    excl = cs - x
    new_seg = np.empty(len(x), dtype=bool)
    new_seg[0] = True
    np.not_equal(ray_ids[1:], ray_ids[:-1], out=new_seg[1:])
    starts = np.flatnonzero(new_seg)
    seg_ord = np.cumsum(new_seg) - 1
    return excl - excl[starts][seg_ord]


def segment_sum(x: np.ndarray, ray_ids: np.ndarray, num_segments: int) -> np.ndarray:
    """Sum samples per ray; rays with no samples get 0. x is (n,) or (n, k)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return np.bincount(ray_ids, weights=x, minlength=num_segments)
    out = np.empty((num_segments, x.shape[1]), dtype=np.float64)
    for k in range(x.shape[1]):
        out[:, k] = np.bincount(ray_ids, weights=x[:, k], minlength=num_segments)
    return out


def suffix_sum(x: np.ndarray, ray_ids: np.ndarray, num_segments: int) -> np.ndarray:
    """Within-segment inclusive suffix sum (sum over j >= i of the segment)."""
    x = np.asarray(x, dtype=np.float64)
    totals = segment_sum(x, ray_ids, num_segments)
    return totals[ray_ids] - exclusive_cumsum(x, ray_ids)
