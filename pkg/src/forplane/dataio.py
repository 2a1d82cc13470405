"""Dataset loading/saving and the synthetic analytic oracle scene.

On-disk format: a directory with meta.json plus images/, masks/ and depth/
subdirectories of PNGs. meta.json holds intrinsics, near/far, depth_scale,
the scene AABB and one entry per frame (file names, time, 16 row-major pose
floats). Color is 8-bit, masks are 8-bit 0/255, depth is 16-bit with
world_depth = png_value * depth_scale.

The synthetic scene is a constant-density sphere whose center follows
c(t) = c0 + A sin(2 pi t) u inside the unit cube, colored by position.
Ground-truth images and depths are rendered with the same compositing
equations as the model renderer, at a dense 4096-step quadrature, so the
scene doubles as a numerical oracle for the whole pipeline.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DataError
from .renderer import Camera, clip_to_aabb, composite_packed, pixel_directions


@dataclass
class Frame:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray | None  # (H, W) world units, 0 = invalid
    mask: np.ndarray  # (H, W) bool, True = tissue
    time: float
    pose: np.ndarray  # (4, 4) camera-to-world


@dataclass
class Dataset:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    near: float
    far: float
    depth_scale: float
    aabb_min: np.ndarray
    aabb_max: np.ndarray
    frames: list[Frame] = field(default_factory=list)

    def camera(self, frame_index: int) -> Camera:
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width,
                      self.height, self.frames[frame_index].pose,
                      self.near, self.far)

    def images(self) -> np.ndarray:
        return np.stack([f.image for f in self.frames])

    def masks(self) -> np.ndarray:
        return np.stack([f.mask for f in self.frames])

    def times(self) -> np.ndarray:
        return np.array([f.time for f in self.frames])


def _load_png(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    return np.asarray(Image.open(path))


def write_color_png(path: str, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_mask_png(path: str, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)


def write_depth_png(path: str, depth: np.ndarray, depth_scale: float) -> None:
    q = np.clip(np.round(np.asarray(depth) / depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def load_dataset(directory: str) -> Dataset:
    meta_path = os.path.join(directory, "meta.json")
    if not os.path.exists(meta_path):
        raise DataError(f"missing file: {meta_path}")
    with open(meta_path, "r", encoding="utf-8") as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{meta_path}: invalid JSON ({exc})") from exc
    try:
        ds = Dataset(int(meta["width"]), int(meta["height"]),
                     float(meta["fx"]), float(meta["fy"]),
                     float(meta["cx"]), float(meta["cy"]),
                     float(meta["near"]), float(meta["far"]),
                     float(meta["depth_scale"]),
                     np.asarray(meta["aabb_min"], dtype=np.float64),
                     np.asarray(meta["aabb_max"], dtype=np.float64))
        entries = meta["frames"]
    except KeyError as exc:
        raise DataError(f"{meta_path}: missing key {exc}") from exc

    for i, entry in enumerate(entries):
        img = _load_png(os.path.join(directory, entry["image"]))
        if img.shape != (ds.height, ds.width, 3):
            raise DataError(f"{entry['image']}: expected {ds.height}x{ds.width}x3, "
                            f"got {img.shape}")
        mask_raw = _load_png(os.path.join(directory, entry["mask"]))
        if mask_raw.shape != (ds.height, ds.width):
            raise DataError(f"{entry['mask']}: dimension mismatch {mask_raw.shape}")
        bad = ~np.isin(mask_raw, (0, 255))
        if bad.any():
            raise DataError(f"{entry['mask']}: non-binary mask value "
                            f"{int(mask_raw[bad][0])}")
        depth = None
        if entry.get("depth"):
            d_raw = _load_png(os.path.join(directory, entry["depth"]))
            if d_raw.shape != (ds.height, ds.width):
                raise DataError(f"{entry['depth']}: dimension mismatch {d_raw.shape}")
            depth = d_raw.astype(np.float64) * ds.depth_scale
        pose = np.asarray(entry["pose"], dtype=np.float64)
        if pose.size != 16:
            raise DataError(f"frame {i}: pose must be 16 row-major floats")
        pose = pose.reshape(4, 4)
        r = pose[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-5):
            raise DataError(f"frame {i}: pose rotation block is not orthonormal")
        ds.frames.append(Frame(img.astype(np.float64) / 255.0, depth,
                               mask_raw.astype(bool), float(entry["time"]), pose))
    if not ds.frames:
        raise DataError(f"{directory}: dataset has no frames")
    ds.frames.sort(key=lambda f: f.time)
    return ds


def save_dataset(ds: Dataset, directory: str) -> None:
    for sub in ("images", "masks", "depth"):
        os.makedirs(os.path.join(directory, sub), exist_ok=True)
    entries = []
    for i, fr in enumerate(ds.frames):
        name = f"{i:04d}.png"
        write_color_png(os.path.join(directory, "images", name), fr.image)
        write_mask_png(os.path.join(directory, "masks", name), fr.mask)
        entry = {"image": f"images/{name}", "mask": f"masks/{name}",
                 "time": fr.time, "pose": [float(v) for v in fr.pose.reshape(-1)]}
        if fr.depth is not None:
            write_depth_png(os.path.join(directory, "depth", name), fr.depth,
                            ds.depth_scale)
            entry["depth"] = f"depth/{name}"
        entries.append(entry)
    meta = {"width": ds.width, "height": ds.height, "fx": ds.fx, "fy": ds.fy,
            "cx": ds.cx, "cy": ds.cy, "near": ds.near, "far": ds.far,
            "depth_scale": ds.depth_scale,
            "aabb_min": [float(v) for v in ds.aabb_min],
            "aabb_max": [float(v) for v in ds.aabb_max],
            "frames": entries}
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)


@dataclass
class SynthConfig:
    width: int = 64
    height: int = 64
    frames: int = 30
    radius: float = 0.28
    amplitude: float = 0.15
    sigma0: float = 25.0
    center: tuple[float, float, float] = (0.5, 0.5, 0.5)
    motion_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    camera_z: float = -1.2  # camera sits on the -z side looking at the cube
    near: float = 0.8
    far: float = 2.8
    depth_scale: float = 5e-5
    oracle_steps: int = 4096
    occluder: bool = False
    occluder_frac: float = 0.3  # occluder width as a fraction of the image
    occluder_value: float = 0.35


@dataclass
class AnalyticOracle:
    """Closed-form density/color field the synthetic images were rendered from."""

    cfg: SynthConfig

    def center_at(self, t) -> np.ndarray:
        c0 = np.asarray(self.cfg.center, dtype=np.float64)
        u = np.asarray(self.cfg.motion_axis, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        return c0 + self.cfg.amplitude * np.sin(2 * np.pi * t)[..., None] * u

    def sigma(self, points: np.ndarray, times) -> np.ndarray:
        """Density at world points (n, 3) and times (n,): sigma0 inside the sphere."""
        points = np.asarray(points, dtype=np.float64)
        d = points - self.center_at(times)
        inside = (d * d).sum(axis=-1) <= self.cfg.radius ** 2
        return np.where(inside, self.cfg.sigma0, 0.0)

    def color(self, points: np.ndarray) -> np.ndarray:
        """Position-mapped RGB: the unit-cube coordinates themselves."""
        return np.clip(np.asarray(points, dtype=np.float64), 0.0, 1.0)


def default_camera(cfg: SynthConfig) -> Camera:
    pose = np.eye(4)
    pose[:3, 3] = (0.5, 0.5, cfg.camera_z)
    # front cube face spans the image exactly: fx = W * |camera_z| when the
    # face sits one unit of |camera_z| away
    fx = cfg.width * abs(cfg.camera_z)
    fy = cfg.height * abs(cfg.camera_z)
    return Camera(fx, fy, cfg.width / 2.0, cfg.height / 2.0,
                  cfg.width, cfg.height, pose, cfg.near, cfg.far)


def render_oracle_frame(oracle: AnalyticOracle, cam: Camera, time: float,
                        steps: int, aabb_min=(0, 0, 0), aabb_max=(1, 1, 1)):
    """Dense midpoint quadrature of the analytic field with the model's
    compositing equations. Returns (rgb, depth, opacity) images."""
    H, W = cam.height, cam.width
    rgb = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    opacity = np.zeros((H, W))
    chunk = max(1, 262144 // max(steps, 1) // W)
    for r0 in range(0, H, chunk):
        r1 = min(H, r0 + chunk)
        rows, cols = np.mgrid[r0:r1, 0:W]
        dirs = pixel_directions(cam, rows.ravel(), cols.ravel())
        origins = np.broadcast_to(cam.pose[:3, 3], dirs.shape)
        t0, t1, _ = clip_to_aabb(origins, dirs, aabb_min, aabb_max,
                                 cam.near, cam.far)
        n = len(dirs)
        dpr = (t1 - t0) / steps
        t = t0[:, None] + (np.arange(steps)[None, :] + 0.5) * dpr[:, None]
        pos = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3)
        ids = np.repeat(np.arange(n, dtype=np.int64), steps)
        sig = oracle.sigma(pos, np.full(len(pos), time))
        col = oracle.color(pos)
        c, d, o, _ = composite_packed(sig, col, np.repeat(dpr, steps),
                                      t.reshape(-1), ids, n)
        rgb[r0:r1] = c.reshape(r1 - r0, W, 3)
        depth[r0:r1] = d.reshape(r1 - r0, W)
        opacity[r0:r1] = o.reshape(r1 - r0, W)
    return rgb, depth, opacity


def _occluder_mask(cfg: SynthConfig, frame: int) -> np.ndarray:
    """Moving rectangle of zeros (the synthetic 'tool') sweeping left to right."""
    H, W = cfg.height, cfg.width
    mask = np.ones((H, W), dtype=bool)
    T = max(cfg.frames - 1, 1)
    cx = (0.2 + 0.6 * frame / T) * W
    half_w = 0.5 * cfg.occluder_frac * W
    c0 = max(0, int(round(cx - half_w)))
    c1 = min(W, int(round(cx + half_w)))
    r0 = int(0.2 * H)
    r1 = int(0.85 * H)
    mask[r0:r1, c0:c1] = False
    return mask


def generate_synthetic(cfg: SynthConfig):
    """Build the oracle dataset in memory; returns (Dataset, AnalyticOracle).

    Images/depths come from dense quadrature of the analytic field. With the
    occluder enabled, masks carve out a moving rectangle and the image is
    painted flat there (the mask excludes those pixels from supervision).
    """
    oracle = AnalyticOracle(cfg)
    cam = default_camera(cfg)
    ds = Dataset(cfg.width, cfg.height, cam.fx, cam.fy, cam.cx, cam.cy,
                 cfg.near, cfg.far, cfg.depth_scale,
                 np.zeros(3), np.ones(3))
    T = cfg.frames
    for i in range(T):
        time = i / (T - 1) if T > 1 else 0.0
        rgb, depth, _ = render_oracle_frame(oracle, cam, time, cfg.oracle_steps)
        mask = _occluder_mask(cfg, i) if cfg.occluder else np.ones((cfg.height, cfg.width), bool)
        image = rgb.copy()
        if cfg.occluder:
            image[~mask] = cfg.occluder_value
        ds.frames.append(Frame(image, depth, mask, time, cam.pose.copy()))
    return ds, oracle


def write_outputs(renders: list[dict], gt_frames: list[Frame], out_dir: str,
                  depth_scale: float) -> list[str]:
    """Write per-frame color, 16-bit depth and |render - gt| maps.

    renders[i] needs "rgb" and "depth" images; returns written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, (render, frame) in enumerate(zip(renders, gt_frames)):
        color_p = os.path.join(out_dir, f"{i:04d}_color.png")
        depth_p = os.path.join(out_dir, f"{i:04d}_depth.png")
        diff_p = os.path.join(out_dir, f"{i:04d}_diff.png")
        write_color_png(color_p, render["rgb"])
        write_depth_png(depth_p, render["depth"], depth_scale)
        write_color_png(diff_p, np.abs(render["rgb"] - frame.image))
        paths += [color_p, depth_p, diff_p]
    return paths
