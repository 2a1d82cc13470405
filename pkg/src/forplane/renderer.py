"""Camera rays and quadrature volume rendering.

Rays go through pixel centers of a pinhole camera (+z forward in the camera
frame). Along each ray, uniform samples in the AABB-clipped [t_near, t_far]
are optionally filtered by the indicator grid, pushed through the field
(planes -> encoding -> decoder), then alpha-composited:

    q_i = sigma_i * delta_i
    T_i = exp(-sum_{j<i} q_j)        alpha_i = 1 - exp(-q_i)
    w_i = T_i * alpha_i
    rgb = sum w_i c_i    depth = sum w_i t_i    opacity = sum w_i

The backward pass returns exact gradients of (rgb, depth, opacity) with
respect to every sample's sigma and color, including the transmittance
coupling of a sample's density to all later weights.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import segments
from .config import EncodingConfig, RenderConfig
from .encoding import encode_points, encoding_width
from .mlp import MlpParams, mlp_forward
from .planes import PlaneSet, PlaneView, _as_view, fuse_features


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray  # 4x4 camera-to-world
    near: float
    far: float

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        if not (self.far > self.near > 0):
            raise ValueError("camera needs far > near > 0")
        r = self.pose[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-5):
            raise ValueError("pose rotation block is not orthonormal")


@dataclass
class Ray:
    origin: np.ndarray  # (3,)
    direction: np.ndarray  # (3,), unit norm
    t_near: float
    t_far: float
    pixel: tuple[int, int]  # (row, col)
    time: float


def pixel_directions(cam: Camera, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Unit world-space directions through the given pixel centers."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    d = np.stack([(cols + 0.5 - cam.cx) / cam.fx,
                  (rows + 0.5 - cam.cy) / cam.fy,
                  np.ones_like(rows)], axis=-1)
    d = d @ cam.pose[:3, :3].T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_for_pixel(cam: Camera, row: int, col: int, time: float) -> Ray:
    if not (0 <= row < cam.height and 0 <= col < cam.width):
        raise ValueError(f"pixel ({row}, {col}) outside {cam.height}x{cam.width} image")
    d = pixel_directions(cam, np.array([row]), np.array([col]))[0]
    return Ray(cam.pose[:3, 3].copy(), d, cam.near, cam.far, (row, col), time)


def clip_to_aabb(origins: np.ndarray, dirs: np.ndarray, aabb_min, aabb_max,
                 t_near: float, t_far: float):
    """Slab-test ray/box intersection intersected with [t_near, t_far].

    Returns (t0, t1, hit); rays that miss get t0 == t1.
    """
    aabb_min = np.asarray(aabb_min, dtype=np.float64)
    aabb_max = np.asarray(aabb_max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (aabb_min - origins) * inv
        tb = (aabb_max - origins) * inv
    lo = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb))
    hi = np.where(np.isnan(tb), np.inf, np.maximum(ta, tb))
    # axis-parallel rays: origin outside the slab never hits
    par = dirs == 0
    outside = par & ((origins < aabb_min) | (origins > aabb_max))
    lo = np.where(par, -np.inf, lo)
    hi = np.where(par, np.inf, hi)
    t0 = np.maximum(lo.max(axis=-1), t_near)
    t1 = np.minimum(hi.min(axis=-1), t_far)
    t1 = np.where(outside.any(axis=-1), t0, t1)
    hit = t1 > t0
    return t0, np.maximum(t1, t0), hit


@dataclass
class CompositeCache:
    q: np.ndarray  # sigma * delta per sample
    transmittance: np.ndarray
    alpha: np.ndarray
    weights: np.ndarray
    rgb_samples: np.ndarray
    t_values: np.ndarray
    deltas: np.ndarray
    ray_ids: np.ndarray
    num_rays: int


def composite_packed(sigma, rgb, deltas, t_values, ray_ids, num_rays: int):
    """Composite packed samples into per-ray (rgb, depth, opacity) + cache."""
    sigma = np.asarray(sigma, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    deltas = np.asarray(deltas, dtype=np.float64)
    t_values = np.asarray(t_values, dtype=np.float64)
    ray_ids = np.asarray(ray_ids)

    q = sigma * deltas
    trans = np.exp(-segments.exclusive_cumsum(q, ray_ids))
    alpha = -np.expm1(-q)
    w = trans * alpha
    out_rgb = segments.segment_sum(w[:, None] * rgb, ray_ids, num_rays)
    out_depth = segments.segment_sum(w * t_values, ray_ids, num_rays)
    out_opacity = segments.segment_sum(w, ray_ids, num_rays)
    cache = CompositeCache(q, trans, alpha, w, rgb, t_values, deltas, ray_ids, num_rays)
    return out_rgb, out_depth, out_opacity, cache


def composite_backward_packed(cache: CompositeCache, d_rgb, d_depth, d_opacity=None):
    """Per-sample (d_sigma, d_rgb_i) from upstream per-ray gradients.

    With u_i = dC . c_i + dD t_i + dO, the density gradient is
        dL/dq_i = u_i T_i (1 - alpha_i) - sum_{j > i} u_j w_j
    and d_sigma_i = delta_i dL/dq_i.
    """
    ids = cache.ray_ids
    d_rgb = np.asarray(d_rgb, dtype=np.float64).reshape(cache.num_rays, 3)
    d_depth = np.asarray(d_depth, dtype=np.float64).reshape(cache.num_rays)
    u = (d_rgb[ids] * cache.rgb_samples).sum(axis=1) + d_depth[ids] * cache.t_values
    if d_opacity is not None:
        u = u + np.asarray(d_opacity, dtype=np.float64).reshape(cache.num_rays)[ids]
    uw = u * cache.weights
    tail = segments.suffix_sum(uw, ids, cache.num_rays)
    d_q = u * cache.transmittance * (1.0 - cache.alpha) - (tail - uw)
    d_sigma = d_q * cache.deltas
    d_rgb_samples = cache.weights[:, None] * d_rgb[ids]
    return d_sigma, d_rgb_samples


def composite(samples):
    """Single-ray convenience form: samples is a list of (sigma, rgb, delta, t).

    Empty input renders black at depth 0 with opacity 0.
    """
    if len(samples) == 0:
        return {"rgb": np.zeros(3), "depth": 0.0, "opacity": 0.0}, None
    sigma = np.array([s[0] for s in samples], dtype=np.float64)
    rgb = np.array([s[1] for s in samples], dtype=np.float64)
    deltas = np.array([s[2] for s in samples], dtype=np.float64)
    tv = np.array([s[3] for s in samples], dtype=np.float64)
    ids = np.zeros(len(samples), dtype=np.int64)
    out_rgb, out_depth, out_op, cache = composite_packed(sigma, rgb, deltas, tv, ids, 1)
    return {"rgb": out_rgb[0], "depth": float(out_depth[0]),
            "opacity": float(out_op[0])}, cache


@dataclass
class FieldBundle:
    """Everything needed to answer sigma/color queries: planes (or a forced
    view of them), the encoding config, and decoder parameters."""

    planes: PlaneSet | PlaneView
    encoding: EncodingConfig
    mlp: MlpParams
    eval_count: int = 0  # field evaluations, for the marching benchmarks

    @property
    def plane_set(self) -> PlaneSet:
        return _as_view(self.planes).planes

    def query(self, points: np.ndarray, dirs: np.ndarray | None = None,
              need_cache: bool = False):
        """sigma, rgb and (fuse_cache, mlp_cache, enc_width) for (n, 4) points."""
        self.eval_count += len(points)
        fused, fuse_cache = fuse_features(self.planes, points, need_cache=need_cache)
        enc = encode_points(points, self.encoding, directions=dirs, dtype=fused.dtype)
        x = np.concatenate([enc, fused], axis=1)
        sigma, rgb, mlp_cache = mlp_forward(self.mlp, x, need_cache=need_cache)
        return sigma, rgb, (fuse_cache, mlp_cache, enc.shape[1])


def field_input_dim(enc_cfg: EncodingConfig, planes: PlaneSet) -> int:
    return encoding_width(enc_cfg) + planes.fused_dim


@dataclass
class SamplePack:
    """Packed surviving samples of a ray batch plus forward caches."""

    points: np.ndarray  # (n, 4) unit-cube coords
    dirs: np.ndarray | None
    t_values: np.ndarray
    deltas: np.ndarray
    ray_ids: np.ndarray
    num_rays: int
    fuse_cache: object = None
    mlp_cache: object = None
    enc_width: int = 0
    composite_cache: CompositeCache | None = None


def make_candidates(origins, dirs, times, t0, t1, steps: int,
                    jitter: bool = False, rng: np.random.Generator | None = None):
    """Uniform candidate samples for each ray: (points4, t, delta, ray_ids)."""
    nrays = len(origins)
    deltas_per_ray = (t1 - t0) / steps
    offs = rng.random((nrays, steps)) if jitter else np.full((nrays, steps), 0.5)
    t = t0[:, None] + (np.arange(steps)[None, :] + offs) * deltas_per_ray[:, None]
    pos = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    ray_ids = np.repeat(np.arange(nrays, dtype=np.int64), steps)
    pts = np.concatenate([pos.reshape(-1, 3),
                          np.repeat(times, steps)[:, None]], axis=1)
    return pts, t.reshape(-1), np.repeat(deltas_per_ray, steps), ray_ids


def render_batch_training(bundle: FieldBundle, grid, origins, dirs, times,
                          t0, t1, steps: int, rng=None, jitter=True):
    """Forward render of a training ray batch; keeps caches for backward.

    `grid` may be None (dense). Unit-cube conversion uses the plane AABB.
    Returns (rgb (R,3), depth (R,), opacity (R,), SamplePack).
    """
    ps = bundle.plane_set
    pts, tv, dl, ids = make_candidates(origins, dirs, times, t0, t1, steps,
                                       jitter=jitter, rng=rng)
    unit = np.empty_like(pts)
    unit[:, :3] = ps.normalize_positions(pts[:, :3])
    unit[:, 3] = pts[:, 3]
    keep = ~((t1 <= t0)[ids])  # rays that missed the box contribute nothing
    if grid is not None:
        keep &= grid.filter_mask(unit)
    unit, tv, dl, ids = unit[keep], tv[keep], dl[keep], ids[keep]
    sample_dirs = None
    if bundle.encoding.kind == "frequency":
        sample_dirs = dirs[ids]
    pack = SamplePack(unit, sample_dirs, tv, dl, ids, len(origins))
    if len(unit) == 0:
        R = len(origins)
        return np.zeros((R, 3)), np.zeros(R), np.zeros(R), pack
    sigma, rgb_s, (fc, mc, ew) = bundle.query(unit, dirs=sample_dirs, need_cache=True)
    pack.fuse_cache, pack.mlp_cache, pack.enc_width = fc, mc, ew
    out_rgb, out_depth, out_op, ccache = composite_packed(
        sigma, rgb_s, dl, tv, ids, len(origins))
    pack.composite_cache = ccache
    return out_rgb, out_depth, out_op, pack


def backward_from_render(bundle: FieldBundle, pack: SamplePack,
                         d_rgb, d_depth, d_opacity=None) -> None:
    """Chain rendering gradients back into decoder and plane grad buffers."""
    from .mlp import mlp_backward
    from .planes import fuse_backward

    if pack.composite_cache is None:
        return
    d_sigma_s, d_rgb_s = composite_backward_packed(pack.composite_cache,
                                                   d_rgb, d_depth, d_opacity)
    d_input = mlp_backward(bundle.mlp, pack.mlp_cache, d_sigma_s, d_rgb_s)
    fuse_backward(bundle.planes, pack.fuse_cache, d_input[:, pack.enc_width:])


def render_rays(bundle: FieldBundle, grid, origins, dirs, times, t0, t1,
                steps: int, t_min: float = 0.0, use_grid: bool = True,
                block: int = 32):
    """Inference render with empty-space skipping and early termination.

    Walks the uniform step sequence in blocks; rays whose transmittance falls
    below t_min stop marching. Identical sample positions to the dense walk,
    so with a fully-occupied grid and t_min=0 it matches dense rendering.
    """
    ps = bundle.plane_set
    nrays = len(origins)
    out_rgb = np.zeros((nrays, 3))
    out_depth = np.zeros(nrays)
    out_op = np.zeros(nrays)
    q_acc = np.zeros(nrays)
    dpr = (t1 - t0) / steps
    alive = t1 > t0
    stop_q = -np.log(t_min) if t_min > 0 else np.inf

    for s0 in range(0, steps, block):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        nb = min(block, steps - s0)
        t = t0[idx, None] + (s0 + np.arange(nb)[None, :] + 0.5) * dpr[idx, None]
        pos = origins[idx, None, :] + t[..., None] * dirs[idx, None, :]
        ids_local = np.repeat(np.arange(idx.size, dtype=np.int64), nb)
        pts = np.empty((idx.size * nb, 4))
        pts[:, :3] = ps.normalize_positions(pos.reshape(-1, 3))
        pts[:, 3] = np.repeat(times[idx], nb)
        tv = t.reshape(-1)
        dl = np.repeat(dpr[idx], nb)
        keep = np.ones(len(pts), dtype=bool)
        if use_grid and grid is not None:
            keep = grid.filter_mask(pts)
        pts, tv, dl, ids_local = pts[keep], tv[keep], dl[keep], ids_local[keep]
        if len(pts):
            sdirs = dirs[idx][ids_local] if bundle.encoding.kind == "frequency" else None
            sigma, rgb_s, _ = bundle.query(pts, dirs=sdirs, need_cache=False)
            q = np.asarray(sigma, dtype=np.float64) * dl
            trans = np.exp(-(q_acc[idx][ids_local] + segments.exclusive_cumsum(q, ids_local)))
            w = trans * -np.expm1(-q)
            out_rgb[idx] += segments.segment_sum(w[:, None] * rgb_s, ids_local, idx.size)
            out_depth[idx] += segments.segment_sum(w * tv, ids_local, idx.size)
            out_op[idx] += segments.segment_sum(w, ids_local, idx.size)
            q_acc[idx] += segments.segment_sum(q, ids_local, idx.size)
        done = (s0 + nb >= steps)
        alive[idx] = ~done & (q_acc[idx] < stop_q)
        if done:
            break
    return out_rgb, out_depth, out_op


def render_ray(ray: Ray, bundle: FieldBundle, grid, steps: int,
               t_min: float = 0.0, use_grid: bool = True):
    """Render a single ray through the full pipeline (Algorithm-1 order)."""
    ps = bundle.plane_set
    o = ray.origin[None, :]
    d = ray.direction[None, :]
    t0, t1, hit = clip_to_aabb(o, d, ps.aabb_min, ps.aabb_max, ray.t_near, ray.t_far)
    rgb, depth, op = render_rays(bundle, grid, o, d, np.array([ray.time]),
                                 t0, t1, steps, t_min=t_min, use_grid=use_grid)
    return {"rgb": rgb[0], "depth": float(depth[0]), "opacity": float(op[0])}


def render_image(bundle: FieldBundle, grid, cam: Camera, time: float,
                 steps: int, t_min: float = 1e-4, use_grid: bool = True,
                 threads: int = 1):
    """Render a full frame; rows are chunked (and optionally threaded, which
    stays deterministic because chunk outputs are disjoint)."""
    ps = bundle.plane_set
    H, W = cam.height, cam.width
    rgb = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    opacity = np.zeros((H, W))
    chunk = max(1, 4096 // W)

    def do_rows(r0: int):
        r1 = min(H, r0 + chunk)
        rows, cols = np.mgrid[r0:r1, 0:W]
        dirs = pixel_directions(cam, rows.ravel(), cols.ravel())
        origins = np.broadcast_to(cam.pose[:3, 3], dirs.shape)
        t0, t1, _ = clip_to_aabb(origins, dirs, ps.aabb_min, ps.aabb_max,
                                 cam.near, cam.far)
        times = np.full(len(dirs), time)
        c, d, o = render_rays(bundle, grid, origins, dirs, times, t0, t1,
                              steps, t_min=t_min, use_grid=use_grid)
        rgb[r0:r1] = c.reshape(r1 - r0, W, 3)
        depth[r0:r1] = d.reshape(r1 - r0, W)
        opacity[r0:r1] = o.reshape(r1 - r0, W)

    starts = range(0, H, chunk)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(do_rows, starts))
    else:
        for r0 in starts:
            do_rows(r0)
    return {"rgb": np.clip(rgb, 0.0, 1.0), "depth": depth, "opacity": opacity}
