"""Training loop: sampling -> marching -> field -> rendering -> losses ->
backward -> Adam -> occupancy updates, with checkpointing.

A fixed seed gives a fully deterministic run: one RNG drives pixel draws,
sample jitter and occupancy probes in a fixed order, and all reductions are
serial. Checkpoints are a self-describing binary: magic "FPLN", a u32 format
version, a u32 header length, a JSON header (config, shapes, iteration) and a
little-endian f32 blob holding plane values (level-major, plane order xy, yz,
xz, xt, yt, zt), decoder parameters, Adam moments and the occupancy
density_cache, in that order.
"""

from __future__ import annotations

import json
import struct
import time as _time
from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import metrics as M
from . import sampler as S
from .config import Config, config_from_flat
from .dataio import Dataset
from .errors import CheckpointError, DataError, NumericalError
from .mlp import MlpParams
from .occupancy import IndicatorGrid
from .planes import AXIS_PAIRS, PlaneSet
from .renderer import (FieldBundle, backward_from_render, clip_to_aabb,
                       field_input_dim, render_batch_training, render_image)

CHECKPOINT_MAGIC = b"FPLN"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamParam:
    name: str
    value: np.ndarray
    grad: np.ndarray
    group: str  # "planes" | "mlp"
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros_like(self.value, dtype=np.float64)
        if self.v is None:
            self.v = np.zeros_like(self.value, dtype=np.float64)


@dataclass
class AdamState:
    params: list[AdamParam]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    step_count: int = 0

    def step(self, lr_by_group: dict[str, float]) -> None:
        """One bias-corrected Adam update over every registered parameter."""
        self.step_count += 1
        b1, b2, t = self.beta1, self.beta2, self.step_count
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p in self.params:
            g = p.grad
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient in parameter group "
                                     f"{p.group!r} ({p.name})")
            p.m *= b1
            p.m += (1 - b1) * g
            p.v *= b2
            p.v += (1 - b2) * (g * g.astype(np.float64))
            lr = lr_by_group[p.group]
            upd = lr * (p.m / c1) / (np.sqrt(p.v / c2) + self.eps)
            p.value -= upd.astype(p.value.dtype)

    def zero_grads(self) -> None:
        for p in self.params:
            p.grad[...] = 0

    def check_finite(self) -> None:
        for p in self.params:
            if not np.isfinite(p.value).all():
                raise NumericalError(f"parameter {p.name} became non-finite")


def register_params(planes: PlaneSet, mlp: MlpParams) -> list[AdamParam]:
    """Fixed parameter order shared by Adam and the checkpoint blob."""
    out = []
    for li, level in enumerate(planes.levels):
        for pair in AXIS_PAIRS:
            g = level[pair]
            out.append(AdamParam(f"plane.l{li}.{pair}", g.values, g.grad, "planes"))
    for name, p in mlp.parameters():
        out.append(AdamParam(f"mlp.{name}", p.value, p.grad, "mlp"))
    return out


def cosine_lr_scale(iteration: int, total: int, final_frac: float) -> float:
    prog = min(max(iteration / max(total, 1), 0.0), 1.0)
    return final_frac + (1.0 - final_frac) * 0.5 * (1.0 + np.cos(np.pi * prog))


# ---------------------------------------------------------------------------
# State

@dataclass
class TrainState:
    config: Config
    planes: PlaneSet
    mlp: MlpParams
    grid: IndicatorGrid
    adam: AdamState
    iteration: int = 0
    num_frames: int = 1  # full dataset frame count (for time normalization)

    def bundle(self, view=None) -> FieldBundle:
        return FieldBundle(view if view is not None else self.planes,
                           self.config.encoding, self.mlp)


def frame_tau(index, num_frames: int):
    """Dataset frame index -> normalized time: i / (T - 1), 0 for T == 1."""
    if num_frames <= 1:
        return np.zeros_like(np.asarray(index, dtype=np.float64))
    return np.asarray(index, dtype=np.float64) / (num_frames - 1)


def split_indices(num_frames: int, split: str):
    """(train, eval) dataset indices; 'alternate' holds out odd frames."""
    idx = list(range(num_frames))
    if split == "all" or num_frames == 1:
        return idx, []
    return idx[0::2], idx[1::2]


def scene_tau_occ(cfg: Config, dataset: Dataset) -> float:
    return cfg.occupancy.threshold_alpha * cfg.render.train_steps / \
        (dataset.far - dataset.near)


def build_state(dataset: Dataset, cfg: Config, dtype=np.float32) -> TrainState:
    """Fresh training state for a dataset; surfaces config inconsistencies."""
    cfg.validate()
    train_idx, _ = split_indices(len(dataset.frames), cfg.train.split)
    if cfg.loss.depth_mode != "none":
        missing = [i for i in train_idx if dataset.frames[i].depth is None]
        if missing:
            raise DataError(f"loss.depth_mode={cfg.loss.depth_mode} but frames "
                            f"{missing[:4]} have no depth maps")
    rng = np.random.default_rng(cfg.train.seed)
    time_res = cfg.planes.time_res or len(train_idx)
    planes = PlaneSet.create(cfg.planes.levels, time_res, cfg.planes.feature_dim,
                             rng, aabb_min=dataset.aabb_min,
                             aabb_max=dataset.aabb_max,
                             level_fusion=cfg.planes.level_fusion,
                             static_init_spread=cfg.planes.static_init_spread,
                             dtype=dtype)
    _maybe_randomize_dynamic(planes, cfg, rng)
    mlp = MlpParams.create(field_input_dim(cfg.encoding, planes), cfg.mlp,
                           rng, dtype=dtype)
    grid = IndicatorGrid.create(cfg.occupancy.dims, scene_tau_occ(cfg, dataset),
                                ema=cfg.occupancy.ema,
                                init_scale=cfg.occupancy.init_scale,
                                transmittance_floor=cfg.render.t_min)
    adam = AdamState(register_params(planes, mlp), cfg.train.beta1,
                     cfg.train.beta2, cfg.train.eps)
    return TrainState(cfg, planes, mlp, grid, adam,
                      num_frames=len(dataset.frames))


def _maybe_randomize_dynamic(planes: PlaneSet, cfg: Config,
                             rng: np.random.Generator) -> None:
    # the w/o-disentangle ablation starts dynamic planes off-identity
    spread = cfg.planes.dynamic_init_spread
    if spread:
        for g in planes.dynamic_grids():
            g.values[...] = rng.uniform(1.0 - spread, 1.0 + spread,
                                        size=g.values.shape).astype(g.values.dtype)


# ---------------------------------------------------------------------------
# One batch forward/backward (also the gradcheck entry point)

@dataclass
class RayBatch:
    origins: np.ndarray  # (B, 3)
    dirs: np.ndarray  # (B, 3) unit
    times: np.ndarray  # (B,)
    t0: np.ndarray
    t1: np.ndarray
    gt_rgb: np.ndarray  # (B, 3)
    gt_depth: np.ndarray | None  # (B,), 0 = invalid


def eval_total_loss(state: TrainState, batch: RayBatch, with_grads: bool = True,
                    rng: np.random.Generator | None = None,
                    jitter: bool = False, use_grid: bool = True):
    """Render a ray batch, evaluate every loss term, optionally backprop.

    Returns a dict of loss terms including "total". Gradients accumulate into
    the plane/decoder grad buffers (caller zeroes them).
    """
    cfg = state.config
    bundle = state.bundle()
    grid = state.grid if use_grid else None
    pred_rgb, pred_depth_raw, opacity, pack = render_batch_training(
        bundle, grid, batch.origins, batch.dirs, batch.times, batch.t0,
        batch.t1, cfg.render.train_steps, rng=rng, jitter=jitter)

    if cfg.render.normalize_depth:
        safe_op = np.maximum(opacity, 1e-8)
        pred_depth = pred_depth_raw / safe_op
    else:
        pred_depth = pred_depth_raw

    terms: dict[str, float] = {}
    terms["rgb"], d_rgb = L.rgb_loss(pred_rgb, batch.gt_rgb)
    d_depth_used = np.zeros(len(batch.origins))
    if cfg.loss.depth_mode == "stereo" and batch.gt_depth is not None:
        terms["depth"], d_dep = L.depth_loss(pred_depth, batch.gt_depth,
                                             cfg.loss.huber_delta)
        d_depth_used += cfg.loss.lambda_d * d_dep
    elif cfg.loss.depth_mode == "monocular" and batch.gt_depth is not None:
        terms["mono"], d_dep, _ = L.mono_loss(pred_depth, batch.gt_depth)
        d_depth_used += cfg.loss.lambda_d * d_dep

    tv, ts, de = L.regularizer_losses(state.planes, cfg.loss, with_grads=with_grads)
    terms.update(tv=tv, ts=ts, de=de)
    terms["total"] = L.combine_terms(terms, cfg.loss)

    if with_grads:
        if cfg.render.normalize_depth:
            d_raw = d_depth_used / safe_op
            d_op = -d_depth_used * pred_depth_raw / (safe_op * safe_op)
        else:
            d_raw, d_op = d_depth_used, None
        backward_from_render(bundle, pack, d_rgb, d_raw, d_op)
    return terms


def make_ray_batch(dataset: Dataset, train_idx: list[int], stacks: dict,
                   wm: S.WeightMaps, rng: np.random.Generator,
                   batch_size: int, aabb_min, aabb_max) -> RayBatch:
    fsel, rows, cols = S.draw_batch(wm, rng, batch_size)
    ds_idx = stacks["ds_index"][fsel]
    poses = stacks["poses"][fsel]
    d_cam = np.stack([(cols + 0.5 - dataset.cx) / dataset.fx,
                      (rows + 0.5 - dataset.cy) / dataset.fy,
                      np.ones(batch_size)], axis=1)
    dirs = np.einsum("bij,bj->bi", poses[:, :3, :3], d_cam)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = poses[:, :3, 3]
    t0, t1, _ = clip_to_aabb(origins, dirs, aabb_min, aabb_max,
                             dataset.near, dataset.far)
    gt_rgb = stacks["images"][fsel, rows, cols]
    gt_depth = None
    if stacks["depths"] is not None:
        gt_depth = stacks["depths"][fsel, rows, cols]
    return RayBatch(origins, dirs, frame_tau(ds_idx, len(dataset.frames)),
                    t0, t1, gt_rgb, gt_depth)


def _train_stacks(dataset: Dataset, train_idx: list[int]) -> dict:
    frames = [dataset.frames[i] for i in train_idx]
    depths = None
    if all(f.depth is not None for f in frames):
        depths = np.stack([f.depth for f in frames])
    return {
        "images": np.stack([f.image for f in frames]),
        "masks": np.stack([f.mask for f in frames]),
        "depths": depths,
        "poses": np.stack([f.pose for f in frames]),
        "ds_index": np.asarray(train_idx),
    }


# ---------------------------------------------------------------------------
# The loop

def train(dataset: Dataset, cfg: Config, log=None, dtype=np.float32):
    """Run the full optimization; returns (TrainState, metric rows)."""
    state = build_state(dataset, cfg, dtype=dtype)
    rng = np.random.default_rng(cfg.train.seed + 1)
    train_idx, eval_idx = split_indices(len(dataset.frames), cfg.train.split)
    stacks = _train_stacks(dataset, train_idx)
    wm = S.weight_maps_for(stacks["images"], stacks["masks"], cfg.sampler)

    occ = cfg.occupancy
    n_probes = max(1, state.grid.num_cells // occ.probes_divisor)
    probe_bundle = state.bundle()

    def probe_sigma(pts):
        return probe_bundle.query(pts, need_cache=False)[0]

    rows: list[dict] = []
    t_start = _time.perf_counter()
    for it in range(1, cfg.train.iterations + 1):
        state.iteration = it
        batch = make_ray_batch(dataset, train_idx, stacks, wm, rng,
                               cfg.train.batch_rays, dataset.aabb_min,
                               dataset.aabb_max)
        terms = eval_total_loss(state, batch, with_grads=True, rng=rng,
                                jitter=cfg.render.jitter)
        scale = cosine_lr_scale(it - 1, cfg.train.iterations, cfg.train.lr_final)
        state.adam.step({"planes": cfg.train.lr_planes * scale,
                         "mlp": cfg.train.lr_mlp * scale})
        state.adam.zero_grads()
        state.adam.check_finite()

        if it >= occ.warmup and it % occ.update_every == 0:
            state.grid.update(probe_sigma, rng, n_probes)

        if it % cfg.train.log_every == 0 or it == cfg.train.iterations:
            row = {"iteration": it, **{k: float(v) for k, v in terms.items()}}
            view = eval_idx[0] if eval_idx else train_idx[0]
            frame = dataset.frames[view]
            img = render_image(state.bundle(), state.grid, dataset.camera(view),
                               float(frame_tau(np.array([view]),
                                               len(dataset.frames))[0]),
                               cfg.render.train_steps, t_min=cfg.render.t_min)
            row["psnr"] = M.psnr(img["rgb"], frame.image)
            row["psnr_masked"] = M.psnr(img["rgb"], frame.image,
                                        mask=np.repeat(frame.mask[:, :, None], 3, 2))
            row["wall_ms"] = (_time.perf_counter() - t_start) * 1e3
            rows.append(row)
            if log:
                log(f"iter {it:6d}  total {terms['total']:.5f}  "
                    f"rgb {terms['rgb']:.5f}  psnr* {row['psnr_masked']:.2f}")
    return state, rows


def evaluate_frames(state: TrainState, dataset: Dataset, indices,
                    steps: int | None = None, use_grid: bool = True,
                    threads: int = 1):
    """Render full frames and compute the metric table rows."""
    cfg = state.config
    steps = steps or cfg.render.eval_steps
    rows = []
    renders = []
    for i in indices:
        frame = dataset.frames[i]
        tau = float(frame_tau(np.array([i]), len(dataset.frames))[0])
        img = render_image(state.bundle(), state.grid if use_grid else None,
                           dataset.camera(i), tau, steps,
                           t_min=cfg.render.t_min if use_grid else 0.0,
                           use_grid=use_grid, threads=threads)
        mask3 = np.repeat(frame.mask[:, :, None], 3, axis=2)
        row = {"frame": i,
               "psnr": M.psnr(img["rgb"], frame.image),
               "psnr_masked": M.psnr(img["rgb"], frame.image, mask=mask3),
               "ssim": M.ssim(img["rgb"], frame.image)}
        if frame.depth is not None:
            valid = frame.depth > 0
            row["depth_rmse"] = M.depth_rmse(img["depth"], frame.depth, valid) \
                if valid.any() else None
        rows.append(row)
        renders.append(img)
    return rows, renders


# ---------------------------------------------------------------------------
# Checkpoints

def _blob_arrays(state: TrainState) -> list[np.ndarray]:
    arrs = [p.value for p in state.adam.params]
    arrs += [p.m for p in state.adam.params]
    arrs += [p.v for p in state.adam.params]
    arrs.append(state.grid.density_cache)
    return arrs


def save_checkpoint(state: TrainState) -> bytes:
    header = {
        "iteration": state.iteration,
        "config": state.config.to_flat(),
        "num_frames": state.num_frames,
        "planes": {
            "spatial_res": [lv["xy"].res_a for lv in state.planes.levels],
            "time_res": state.planes.levels[0]["xt"].res_b,
            "feature_dim": state.planes.feature_dim,
            "level_fusion": state.planes.level_fusion,
            "aabb_min": [float(v) for v in state.planes.aabb_min],
            "aabb_max": [float(v) for v in state.planes.aabb_max],
        },
        "occupancy": {
            "dims": list(state.grid.dims),
            "tau_occ": state.grid.tau_occ,
            "ema": state.grid.ema,
            "t_min": state.grid.transmittance_floor,
        },
        "blob_len": int(sum(a.size for a in _blob_arrays(state))),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = np.concatenate([a.reshape(-1).astype("<f4") for a in _blob_arrays(state)])
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(head)) \
        + head + blob.tobytes()


def load_checkpoint(data: bytes) -> TrainState:
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic (expected FPLN)")
    version, head_len = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} "
                              f"(expected {CHECKPOINT_VERSION})")
    if len(data) < 12 + head_len:
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(data[12:12 + head_len].decode("utf-8"))
    blob = np.frombuffer(data[12 + head_len:], dtype="<f4")
    if blob.size != header["blob_len"]:
        raise CheckpointError(f"truncated checkpoint blob: expected "
                              f"{header['blob_len']} f32 values, got {blob.size}")

    cfg = config_from_flat(header["config"])
    ph = header["planes"]
    rng = np.random.default_rng(0)
    planes = PlaneSet.create(ph["spatial_res"], ph["time_res"], ph["feature_dim"],
                             rng, aabb_min=ph["aabb_min"], aabb_max=ph["aabb_max"],
                             level_fusion=ph["level_fusion"], dtype=np.float32)
    mlp = MlpParams.create(field_input_dim(cfg.encoding, planes), cfg.mlp, rng,
                           dtype=np.float32)
    oh = header["occupancy"]
    grid = IndicatorGrid.create(oh["dims"], oh["tau_occ"], ema=oh["ema"],
                                transmittance_floor=oh["t_min"])
    adam = AdamState(register_params(planes, mlp), cfg.train.beta1,
                     cfg.train.beta2, cfg.train.eps)
    state = TrainState(cfg, planes, mlp, grid, adam,
                       iteration=header["iteration"],
                       num_frames=header["num_frames"])
    pos = 0
    for arr in _blob_arrays(state):
        arr[...] = blob[pos:pos + arr.size].reshape(arr.shape).astype(arr.dtype)
        pos += arr.size
    state.adam.step_count = state.iteration
    state.grid.rebinarize()
    return state


def save_checkpoint_file(state: TrainState, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(state))


def load_checkpoint_file(path: str) -> TrainState:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())
