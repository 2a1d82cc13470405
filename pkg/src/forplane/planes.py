"""Multi-resolution orthogonal feature planes.

The 4D scene volume is factorized into a static field (space planes xy, yz,
xz) and a dynamic field (space-time planes xt, yt, zt), repeated over L
resolution levels. A sample point (x, y, z, t) in the unit 4-cube queries
every plane by bilinear interpolation and the per-plane feature vectors are
fused by element-wise multiplication (optionally concatenating per-level
products instead of multiplying across levels).

Gradients with respect to plane node values are computed in closed form and
accumulated into per-grid `grad` buffers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

# Plane order is fixed: it defines checkpoint layout and fusion order.
STATIC_PAIRS = ("xy", "yz", "xz")
DYNAMIC_PAIRS = ("xt", "yt", "zt")
AXIS_PAIRS = STATIC_PAIRS + DYNAMIC_PAIRS

# Column of the (n, 4) point array each plane axis reads: x=0, y=1, z=2, t=3.
PAIR_COLUMNS = {
    "xy": (0, 1),
    "yz": (1, 2),
    "xz": (0, 2),
    "xt": (0, 3),
    "yt": (1, 3),
    "zt": (2, 3),
}


@dataclass
class PlaneGrid:
    """One feature plane: a res_a x res_b lattice of D-vectors plus its grad."""

    axis_pair: str
    values: np.ndarray  # (res_a, res_b, D)
    grad: np.ndarray  # same shape

    @property
    def res_a(self) -> int:
        return self.values.shape[0]

    @property
    def res_b(self) -> int:
        return self.values.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.values.shape[2]

    def zero_grad(self) -> None:
        self.grad[...] = 0


def make_plane(axis_pair: str, res_a: int, res_b: int, feature_dim: int,
               fill: float | np.ndarray = 1.0, dtype=np.float32) -> PlaneGrid:
    if res_a < 2 or res_b < 2:
        raise ValueError("bilinear interpolation needs at least a 2x2 lattice")
    values = np.full((res_a, res_b, feature_dim), fill, dtype=dtype) \
        if np.isscalar(fill) else np.asarray(fill, dtype=dtype).reshape(res_a, res_b, feature_dim).copy()
    return PlaneGrid(axis_pair, values, np.zeros_like(values))


def _corner_footprint(res_a: int, res_b: int, u: np.ndarray, w: np.ndarray):
    """Flat node indices and bilinear weights of the 4 cell corners.

    Nodes sit at i/(res-1); out-of-range coordinates clamp to [0, 1].
    Returns (idx, wts): int64 (4, n) flat indices into a (res_a*res_b, D)
    view and float64 (4, n) weights in corner order 00, 10, 01, 11.
    """
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
    w = np.clip(np.asarray(w, dtype=np.float64), 0.0, 1.0)
    pa = u * (res_a - 1)
    pb = w * (res_b - 1)
    ia = np.minimum(pa.astype(np.int64), res_a - 2)
    ib = np.minimum(pb.astype(np.int64), res_b - 2)
    fa = pa - ia
    fb = pb - ib
    base = ia * res_b + ib
    idx = np.stack([base, base + res_b, base + 1, base + res_b + 1])
    wts = np.stack([(1 - fa) * (1 - fb), fa * (1 - fb), (1 - fa) * fb, fa * fb])
    return idx, wts


def bilinear_query(plane: PlaneGrid, u, w) -> np.ndarray:
    """Interpolate the plane at (u, w) in [0, 1]^2; exact at lattice nodes."""
    u = np.atleast_1d(u)
    scalar = np.ndim(w) == 0 and u.shape == (1,)
    w = np.broadcast_to(np.atleast_1d(w), u.shape)
    idx, wts = _corner_footprint(plane.res_a, plane.res_b, u, w)
    flat = plane.values.reshape(-1, plane.feature_dim)
    wts = wts.astype(plane.values.dtype, copy=False)
    out = wts[0, :, None] * flat[idx[0]]
    for c in range(1, 4):
        out += wts[c, :, None] * flat[idx[c]]
    return out[0] if scalar else out


class PlaneSet:
    """All static + dynamic planes across L levels, plus scene normalization."""

    def __init__(self, levels: list[dict[str, PlaneGrid]], aabb_min, aabb_max,
                 level_fusion: str = "multiply"):
        if not levels:
            raise ValueError("PlaneSet needs at least one resolution level")
        dims = {g.feature_dim for lv in levels for g in lv.values()}
        if len(dims) != 1:
            raise ValueError("all planes must share one feature_dim")
        self.levels = levels
        self.aabb_min = np.asarray(aabb_min, dtype=np.float64)
        self.aabb_max = np.asarray(aabb_max, dtype=np.float64)
        self.level_fusion = level_fusion
        self.feature_dim = dims.pop()

    @classmethod
    def create(cls, spatial_res: Sequence[int], time_res: int, feature_dim: int,
               rng: np.random.Generator, aabb_min=(0, 0, 0), aabb_max=(1, 1, 1),
               level_fusion: str = "multiply", static_init_spread: float = 0.1,
               dtype=np.float32) -> "PlaneSet":
        """Fresh planes: static near-identity random, dynamic exactly 1."""
        levels = []
        for n in spatial_res:
            level: dict[str, PlaneGrid] = {}
            for pair in STATIC_PAIRS:
                vals = rng.uniform(1.0 - static_init_spread, 1.0 + static_init_spread,
                                   size=(n, n, feature_dim))
                level[pair] = make_plane(pair, n, n, feature_dim, fill=vals.astype(dtype), dtype=dtype)
            for pair in DYNAMIC_PAIRS:
                level[pair] = make_plane(pair, n, max(time_res, 2), feature_dim,
                                         fill=1.0, dtype=dtype)
            levels.append(level)
        return cls(levels, aabb_min, aabb_max, level_fusion)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def fused_dim(self) -> int:
        if self.level_fusion == "concat":
            return self.feature_dim * self.num_levels
        return self.feature_dim

    def grids(self) -> Iterator[PlaneGrid]:
        """All grids, level-major, in AXIS_PAIRS order (checkpoint order)."""
        for level in self.levels:
            for pair in AXIS_PAIRS:
                yield level[pair]

    def static_grids(self) -> Iterator[PlaneGrid]:
        for level in self.levels:
            for pair in STATIC_PAIRS:
                yield level[pair]

    def dynamic_grids(self) -> Iterator[PlaneGrid]:
        for level in self.levels:
            for pair in DYNAMIC_PAIRS:
                yield level[pair]

    def zero_grad(self) -> None:
        for g in self.grids():
            g.zero_grad()

    def normalize_positions(self, world_xyz: np.ndarray) -> np.ndarray:
        """Map world coordinates into the unit cube of the scene AABB."""
        span = self.aabb_max - self.aabb_min
        return (np.asarray(world_xyz, dtype=np.float64) - self.aabb_min) / span

    def view(self, static: bool = True, dynamic: bool = True) -> "PlaneView":
        return PlaneView(self, static, dynamic)


@dataclass(frozen=True)
class PlaneView:
    """Query view with one field optionally forced to the multiplicative identity.

    Forcing a field to 1 is implemented by skipping its factors during fusion,
    which is exact and leaves the stored parameters untouched.
    """

    planes: PlaneSet
    use_static: bool = True
    use_dynamic: bool = True


def _as_view(field) -> PlaneView:
    return field if isinstance(field, PlaneView) else PlaneView(field)


def force_field_to_identity(planes: PlaneSet, which: str) -> PlaneView:
    """View in which the chosen field ('static' or 'dynamic') reads as all-ones."""
    if which == "static":
        return planes.view(static=False, dynamic=True)
    if which == "dynamic":
        return planes.view(static=True, dynamic=False)
    raise ValueError(f"which must be 'static' or 'dynamic', got {which!r}")


@dataclass
class FuseCache:
    """Per-factor lookups saved by fuse_features for the backward pass."""

    grids: list[PlaneGrid]
    level_of: list[int]
    idx: list[np.ndarray]  # (4, n) per factor
    wts: list[np.ndarray]  # (4, n) per factor
    feats: list[np.ndarray]  # (n, D) per factor
    level_products: list[np.ndarray]  # (n, D) per level (over active factors)
    num_levels: int
    fusion: str
    n: int


def _active_factors(view: PlaneView):
    pairs = []
    if view.use_static:
        pairs += list(STATIC_PAIRS)
    if view.use_dynamic:
        pairs += list(DYNAMIC_PAIRS)
    for li, level in enumerate(view.planes.levels):
        for pair in pairs:
            yield li, level[pair]


def fuse_features(field, points: np.ndarray, need_cache: bool = False):
    """Fuse all active planes at `points` ((n, 4) in [0,1]^4).

    Starts from the all-ones vector and multiplies in every active plane's
    bilinear query; with concat fusion the per-level products are concatenated
    instead of multiplied together. Returns (features, cache); cache is None
    unless requested.
    """
    view = _as_view(field)
    ps = view.planes
    points = np.asarray(points)
    if points.ndim == 1:
        points = points[None, :]
    n = points.shape[0]
    dtype = next(iter(ps.grids())).values.dtype
    L, D = ps.num_levels, ps.feature_dim

    cache = FuseCache([], [], [], [], [], [], L, ps.level_fusion, n) if need_cache else None
    level_products = [np.ones((n, D), dtype=dtype) for _ in range(L)]
    for li, grid in _active_factors(view):
        a, b = PAIR_COLUMNS[grid.axis_pair]
        idx, wts = _corner_footprint(grid.res_a, grid.res_b, points[:, a], points[:, b])
        wts = wts.astype(dtype, copy=False)
        flat = grid.values.reshape(-1, D)
        feat = wts[0, :, None] * flat[idx[0]]
        for c in range(1, 4):
            feat += wts[c, :, None] * flat[idx[c]]
        level_products[li] *= feat
        if cache is not None:
            cache.grids.append(grid)
            cache.level_of.append(li)
            cache.idx.append(idx)
            cache.wts.append(wts)
            cache.feats.append(feat)

    if ps.level_fusion == "concat":
        fused = np.concatenate(level_products, axis=1)
    else:
        fused = level_products[0].copy()
        for p in level_products[1:]:
            fused *= p
    if cache is not None:
        cache.level_products = level_products
    return fused, cache


def _scatter_grad(grid: PlaneGrid, idx: np.ndarray, wts: np.ndarray,
                  contrib: np.ndarray) -> None:
    """grad[node] += sum over samples of corner_weight * contrib."""
    D = grid.feature_dim
    size = grid.res_a * grid.res_b
    all_idx = idx.reshape(-1)
    all_vals = (wts[:, :, None] * contrib[None, :, :]).reshape(-1, D)
    flat = grid.grad.reshape(-1, D)
    for d in range(D):
        flat[:, d] += np.bincount(all_idx, weights=all_vals[:, d],
                                  minlength=size).astype(flat.dtype, copy=False)


def fuse_backward(field, cache: FuseCache, upstream: np.ndarray) -> None:
    """Accumulate d(loss)/d(plane values) given d(loss)/d(fused feature).

    For each factor the gradient is upstream (x) product-of-all-other-factors,
    spread onto its 4 touched nodes by the saved bilinear weights. Leave-one-out
    products use a prefix/suffix sweep so zero-valued features stay exact.
    """
    view = _as_view(field)
    ps = view.planes
    upstream = np.asarray(upstream)
    if upstream.ndim == 1:
        upstream = upstream[None, :]
    F = len(cache.grids)
    if F == 0:
        return
    D = ps.feature_dim

    if cache.fusion == "concat":
        # d(fused)/d(level product) is a slice selector
        level_upstream = [upstream[:, li * D:(li + 1) * D] for li in range(cache.num_levels)]
    else:
        # d(fused)/d(level product l) = product of the other levels' products
        lp = cache.level_products
        L = cache.num_levels
        prefix = np.ones_like(lp[0])
        suffix = [None] * L
        run = np.ones_like(lp[0])
        for li in range(L - 1, -1, -1):
            suffix[li] = run.copy()
            run = run * lp[li]
        level_upstream = []
        for li in range(L):
            level_upstream.append(upstream * prefix * suffix[li])
            prefix = prefix * lp[li]

    # group factor positions by level, preserving fusion order
    by_level: list[list[int]] = [[] for _ in range(cache.num_levels)]
    for fi in range(F):
        by_level[cache.level_of[fi]].append(fi)

    for li, members in enumerate(by_level):
        if not members:
            continue
        k = len(members)
        suffix = [None] * k
        run = np.ones((cache.n, D), dtype=cache.feats[members[0]].dtype)
        for j in range(k - 1, -1, -1):
            suffix[j] = run.copy()
            run = run * cache.feats[members[j]]
        prefix = np.ones_like(run)
        for j, fi in enumerate(members):
            others = prefix * suffix[j]
            contrib = level_upstream[li] * others
            _scatter_grad(cache.grids[fi], cache.idx[fi], cache.wts[fi], contrib)
            prefix = prefix * cache.feats[fi]
