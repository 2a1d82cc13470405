import json
import os

import numpy as np
import pytest
from PIL import Image

from forplane.dataio import (AnalyticOracle, SynthConfig, default_camera,
                             generate_synthetic, load_dataset,
                             render_oracle_frame, save_dataset, write_outputs)
from forplane.errors import DataError
from forplane.renderer import clip_to_aabb, composite_packed
from forplane.sampler import temporal_difference


def small_cfg(**kw):
    defaults = dict(width=16, height=16, frames=3, oracle_steps=512)
    defaults.update(kw)
    return SynthConfig(**defaults)


@pytest.fixture(scope="module")
def small_scene():
    return generate_synthetic(small_cfg())


class TestSynthetic:
    def test_zero_density_renders_black(self):
        ds, _ = generate_synthetic(small_cfg(sigma0=0.0, frames=1))
        assert not ds.frames[0].image.any()
        assert not ds.frames[0].depth.any()

    def test_opaque_sphere_depth_is_first_intersection(self):
        cfg = small_cfg(sigma0=5000.0, frames=1, oracle_steps=4096)
        oracle = AnalyticOracle(cfg)
        origin = np.array([[0.5, 0.5, cfg.camera_z]])
        direction = np.array([[0.0, 0.0, 1.0]])
        t0, t1, _ = clip_to_aabb(origin, direction, (0, 0, 0), (1, 1, 1),
                                 cfg.near, cfg.far)
        steps = cfg.oracle_steps
        dpr = (t1 - t0) / steps
        t = t0[:, None] + (np.arange(steps)[None] + 0.5) * dpr[:, None]
        pos = origin[:, None, :] + t[..., None] * direction[:, None, :]
        sig = oracle.sigma(pos.reshape(-1, 3), np.zeros(steps))
        col = oracle.color(pos.reshape(-1, 3))
        _, depth, _, _ = composite_packed(sig, col, np.repeat(dpr, steps),
                                          t.reshape(-1), np.zeros(steps, np.int64), 1)
        expected = abs(cfg.camera_z) + 0.5 - cfg.radius  # camera to front surface
        assert depth[0] == pytest.approx(expected, abs=1e-3)

    def test_zero_amplitude_is_static(self):
        ds, _ = generate_synthetic(small_cfg(amplitude=0.0))
        for fr in ds.frames[1:]:
            np.testing.assert_array_equal(fr.image, ds.frames[0].image)
        diff = temporal_difference(ds.images(), ds.masks().astype(float), 1, 2)
        assert not diff.any()

    def test_oracle_consistency_rerender(self, small_scene):
        # same equations, same quadrature: the stored images come back
        ds, oracle = small_scene
        cam = default_camera(oracle.cfg)
        rgb, depth, _ = render_oracle_frame(oracle, cam, ds.frames[1].time,
                                            oracle.cfg.oracle_steps)
        assert np.abs(rgb - ds.frames[1].image).max() < 1e-3
        assert np.abs(depth - ds.frames[1].depth).max() < 1e-3

    def test_coarse_quadrature_close_to_dense(self, small_scene):
        # 512-step rendering agrees with the dense reference to 1e-2/channel
        ds, oracle = small_scene
        cam = default_camera(oracle.cfg)
        rgb_coarse, _, _ = render_oracle_frame(oracle, cam, 0.0, 512)
        rgb_dense, _, _ = render_oracle_frame(oracle, cam, 0.0, 4096)
        assert np.abs(rgb_coarse - rgb_dense).max() < 1e-2

    def test_occluder_masks_and_painting(self):
        ds, _ = generate_synthetic(small_cfg(occluder=True))
        m0 = ds.frames[0].mask
        assert not m0.all() and m0.any()
        np.testing.assert_allclose(ds.frames[0].image[~m0], 0.35)
        # the rectangle moves
        assert (ds.frames[0].mask != ds.frames[-1].mask).any()

    def test_opacity_saturates_inside_sphere(self, small_scene):
        ds, oracle = small_scene
        cam = default_camera(oracle.cfg)
        _, _, opacity = render_oracle_frame(oracle, cam, 0.0, 1024)
        assert opacity.max() > 0.999
        assert opacity.min() == pytest.approx(0.0, abs=1e-12)


class TestRoundTrip:
    def test_save_load_identical_arrays(self, small_scene, tmp_path):
        ds, _ = small_scene
        d1 = tmp_path / "a"
        save_dataset(ds, str(d1))
        loaded = load_dataset(str(d1))
        d2 = tmp_path / "b"
        save_dataset(loaded, str(d2))
        again = load_dataset(str(d2))
        assert len(loaded.frames) == len(ds.frames)
        for f1, f2 in zip(loaded.frames, again.frames):
            np.testing.assert_array_equal(f1.image, f2.image)
            np.testing.assert_array_equal(f1.depth, f2.depth)
            np.testing.assert_array_equal(f1.mask, f2.mask)
            np.testing.assert_array_equal(f1.pose, f2.pose)

    def test_depth_quantization_within_one_quantum(self, small_scene, tmp_path):
        ds, _ = small_scene
        save_dataset(ds, str(tmp_path))
        loaded = load_dataset(str(tmp_path))
        err = np.abs(loaded.frames[0].depth - ds.frames[0].depth).max()
        assert err <= ds.depth_scale

    def test_depth_scale_formula(self, tmp_path):
        ds, _ = generate_synthetic(small_cfg(frames=1))
        ds.depth_scale = 0.001
        ds.frames[0].depth[...] = 1.0  # png value 1000
        save_dataset(ds, str(tmp_path))
        raw = np.asarray(Image.open(tmp_path / "depth" / "0000.png"))
        assert raw[0, 0] == 1000
        loaded = load_dataset(str(tmp_path))
        assert loaded.frames[0].depth[0, 0] == pytest.approx(1.0)

    def test_frames_sorted_by_time(self, small_scene, tmp_path):
        ds, _ = small_scene
        save_dataset(ds, str(tmp_path))
        with open(tmp_path / "meta.json") as fh:
            meta = json.load(fh)
        meta["frames"] = meta["frames"][::-1]
        with open(tmp_path / "meta.json", "w") as fh:
            json.dump(meta, fh)
        loaded = load_dataset(str(tmp_path))
        times = [f.time for f in loaded.frames]
        assert times == sorted(times)


class TestLoaderValidation:
    def test_missing_meta(self, tmp_path):
        with pytest.raises(DataError, match="meta.json"):
            load_dataset(str(tmp_path))

    def test_single_frame_dataset(self, tmp_path):
        ds, _ = generate_synthetic(small_cfg(frames=1))
        save_dataset(ds, str(tmp_path))
        loaded = load_dataset(str(tmp_path))
        assert len(loaded.frames) == 1 and loaded.frames[0].time == 0.0

    def test_non_binary_mask_rejected(self, tmp_path):
        ds, _ = generate_synthetic(small_cfg(frames=1))
        save_dataset(ds, str(tmp_path))
        arr = np.asarray(Image.open(tmp_path / "masks" / "0000.png")).copy()
        arr[0, 0] = 37
        Image.fromarray(arr).save(tmp_path / "masks" / "0000.png")
        with pytest.raises(DataError, match="non-binary"):
            load_dataset(str(tmp_path))

    def test_dimension_mismatch_rejected(self, tmp_path):
        ds, _ = generate_synthetic(small_cfg(frames=1))
        save_dataset(ds, str(tmp_path))
        Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(
            tmp_path / "images" / "0000.png")
        with pytest.raises(DataError, match="0000.png"):
            load_dataset(str(tmp_path))

    def test_bad_pose_rejected(self, tmp_path):
        ds, _ = generate_synthetic(small_cfg(frames=1))
        save_dataset(ds, str(tmp_path))
        with open(tmp_path / "meta.json") as fh:
            meta = json.load(fh)
        meta["frames"][0]["pose"][0] = 3.0
        with open(tmp_path / "meta.json", "w") as fh:
            json.dump(meta, fh)
        with pytest.raises(DataError, match="orthonormal"):
            load_dataset(str(tmp_path))

    def test_missing_image_file(self, tmp_path):
        ds, _ = generate_synthetic(small_cfg(frames=1))
        save_dataset(ds, str(tmp_path))
        os.remove(tmp_path / "images" / "0000.png")
        with pytest.raises(DataError, match="missing file"):
            load_dataset(str(tmp_path))


class TestWriteOutputs:
    def test_three_frames_nine_files(self, small_scene, tmp_path):
        ds, _ = small_scene
        renders = [{"rgb": f.image, "depth": f.depth} for f in ds.frames]
        paths = write_outputs(renders, ds.frames, str(tmp_path), ds.depth_scale)
        assert len(paths) == 9
        names = sorted(os.path.basename(p) for p in paths)
        assert names[0] == "0000_color.png" and "0002_diff.png" in names

    def test_perfect_render_gives_zero_diff(self, small_scene, tmp_path):
        ds, _ = small_scene
        renders = [{"rgb": ds.frames[0].image, "depth": ds.frames[0].depth}]
        write_outputs(renders, ds.frames[:1], str(tmp_path), ds.depth_scale)
        diff = np.asarray(Image.open(tmp_path / "0000_diff.png"))
        assert not diff.any()
