import math

import numpy as np
import pytest

from forplane.config import Config, EncodingConfig
from forplane.mlp import MlpParams
from forplane.occupancy import IndicatorGrid
from forplane.planes import PlaneSet
from forplane.renderer import (Camera, FieldBundle, clip_to_aabb, composite,
                               composite_backward_packed, composite_packed,
                               field_input_dim, pixel_directions, ray_for_pixel,
                               render_batch_training, render_ray, render_rays)


def composite_loop_oracle(sigma, rgb, deltas, tvals):
    """Sequential alpha compositing, one sample at a time."""
    T = 1.0
    out_rgb = np.zeros(3)
    depth = 0.0
    opacity = 0.0
    for s, c, d, t in zip(sigma, rgb, deltas, tvals):
        alpha = 1.0 - math.exp(-s * d)
        w = T * alpha
        out_rgb += w * np.asarray(c)
        depth += w * t
        opacity += w
        T *= math.exp(-s * d)
    return out_rgb, depth, opacity


def identity_camera(width=8, height=8, fx=None, fy=None, cx=None, cy=None):
    return Camera(fx or width, fy or height,
                  cx if cx is not None else width / 2,
                  cy if cy is not None else height / 2,
                  width, height, np.eye(4), 0.1, 10.0)


class TestRays:
    def test_principal_ray(self):
        cam = identity_camera(8, 8, fx=10, fy=10, cx=4.0, cy=4.0)
        ray = ray_for_pixel(cam, row=3, col=3, time=0.0)  # 3 + 0.5 - 4 = -0.5
        d = pixel_directions(cam, np.array([3.5 - 0.5]), np.array([3.5 - 0.5]))
        # pixel whose center lands on the principal point:
        ray2 = Camera(10, 10, 3.5, 3.5, 8, 8, np.eye(4), 0.1, 10.0)
        r = ray_for_pixel(ray2, 3, 3, 0.0)
        np.testing.assert_allclose(r.direction, [0, 0, 1], atol=1e-12)
        assert np.linalg.norm(ray.direction) == pytest.approx(1.0, abs=1e-6)
        assert d.shape == (1, 3)

    def test_unit_norm_everywhere(self):
        cam = identity_camera(16, 12, fx=20, fy=25)
        rows, cols = np.mgrid[0:12, 0:16]
        d = pixel_directions(cam, rows.ravel(), cols.ravel())
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-6)

    def test_45_degree_pixel(self):
        # col + 0.5 - cx = 100 with fx = 100: camera dir (1, 0, 1) normalized
        cam = Camera(100, 100, 49.5, 49.5, 200, 100, np.eye(4), 0.1, 10.0)
        r = ray_for_pixel(cam, row=49, col=149, time=0.0)
        np.testing.assert_allclose(r.direction, [1 / math.sqrt(2), 0, 1 / math.sqrt(2)],
                                   atol=1e-9)

    def test_rotated_pose(self):
        rot = np.eye(4)
        rot[:3, :3] = [[0, 0, 1], [0, 1, 0], [-1, 0, 0]]  # +z maps to -x... check
        cam = Camera(10, 10, 3.5, 3.5, 8, 8, rot, 0.1, 10.0)
        r = ray_for_pixel(cam, 3, 3, 0.0)
        np.testing.assert_allclose(r.direction, rot[:3, :3] @ [0, 0, 1], atol=1e-12)

    def test_pose_orthonormality_enforced(self):
        bad = np.eye(4)
        bad[0, 0] = 2.0
        with pytest.raises(ValueError):
            Camera(10, 10, 4, 4, 8, 8, bad, 0.1, 10.0)

    def test_pixel_bounds(self):
        cam = identity_camera()
        with pytest.raises(ValueError):
            ray_for_pixel(cam, 8, 0, 0.0)


class TestClipToAabb:
    def test_through_the_box(self):
        o = np.array([[0.5, 0.5, -1.0]])
        d = np.array([[0.0, 0.0, 1.0]])
        t0, t1, hit = clip_to_aabb(o, d, (0, 0, 0), (1, 1, 1), 0.0, 10.0)
        assert hit[0]
        assert t0[0] == pytest.approx(1.0)
        assert t1[0] == pytest.approx(2.0)

    def test_miss(self):
        o = np.array([[2.5, 0.5, -1.0]])
        d = np.array([[0.0, 0.0, 1.0]])
        t0, t1, hit = clip_to_aabb(o, d, (0, 0, 0), (1, 1, 1), 0.0, 10.0)
        assert not hit[0] and t1[0] == t0[0]

    def test_axis_parallel_inside_slab(self):
        o = np.array([[0.5, 0.5, 0.5]])
        d = np.array([[1.0, 0.0, 0.0]])
        t0, t1, hit = clip_to_aabb(o, d, (0, 0, 0), (1, 1, 1), 0.0, 10.0)
        assert hit[0] and t1[0] == pytest.approx(0.5)

    def test_range_clamp(self):
        o = np.array([[0.5, 0.5, -1.0]])
        d = np.array([[0.0, 0.0, 1.0]])
        t0, t1, _ = clip_to_aabb(o, d, (0, 0, 0), (1, 1, 1), 1.5, 1.8)
        assert (t0[0], t1[0]) == (1.5, 1.8)


class TestComposite:
    def test_single_sample_half_alpha(self):
        out, _ = composite([(math.log(2.0), (1.0, 0.6, 0.2), 1.0, 3.0)])
        np.testing.assert_allclose(out["rgb"], [0.5, 0.3, 0.1], rtol=1e-12)
        assert out["depth"] == pytest.approx(1.5)
        assert out["opacity"] == pytest.approx(0.5)

    def test_empty_is_black(self):
        out, _ = composite([])
        assert out["opacity"] == 0.0 and out["depth"] == 0.0
        np.testing.assert_array_equal(out["rgb"], np.zeros(3))

    def test_constant_density_matches_analytic(self):
        # opacity -> 1 - exp(-sigma L); depth -> closed-form first moment
        sigma0, t_n, t_f, S = 2.0, 1.0, 3.0, 1024
        L = t_f - t_n
        delta = L / S
        t = t_n + (np.arange(S) + 0.5) * delta
        out_rgb, out_depth, out_op, _ = composite_packed(
            np.full(S, sigma0), np.ones((S, 3)), np.full(S, delta), t,
            np.zeros(S, dtype=np.int64), 1)
        opacity_true = 1.0 - math.exp(-sigma0 * L)
        depth_true = t_n * opacity_true + (1 - math.exp(-sigma0 * L)) / sigma0 \
            - L * math.exp(-sigma0 * L)
        assert abs(out_op[0] - opacity_true) < 1e-3
        assert abs(out_depth[0] - depth_true) < 1e-3

    def test_opaque_wall_occludes(self):
        samples = [(1e9, (1.0, 0.0, 0.0), 0.1, 1.0),
                   (5.0, (0.0, 1.0, 0.0), 0.1, 2.0)]
        out, _ = composite(samples)
        np.testing.assert_allclose(out["rgb"], [1, 0, 0], atol=1e-12)
        assert out["depth"] == pytest.approx(1.0)

    def test_packed_matches_per_ray_loop(self):
        rng = np.random.default_rng(0)
        counts = [0, 3, 1, 5]
        ids = np.repeat(np.arange(4), counts)
        n = ids.size
        sigma = rng.uniform(0, 3, n)
        rgb = rng.uniform(0, 1, (n, 3))
        deltas = rng.uniform(0.01, 0.2, n)
        tvals = np.sort(rng.uniform(0, 4, n))
        out_rgb, out_depth, out_op, _ = composite_packed(sigma, rgb, deltas,
                                                         tvals, ids, 4)
        pos = 0
        for r, c in enumerate(counts):
            er, ed, eo = composite_loop_oracle(sigma[pos:pos + c], rgb[pos:pos + c],
                                               deltas[pos:pos + c], tvals[pos:pos + c])
            np.testing.assert_allclose(out_rgb[r], er, rtol=1e-10, atol=1e-14)
            assert out_depth[r] == pytest.approx(ed, abs=1e-12)
            assert out_op[r] == pytest.approx(eo, abs=1e-12)
            pos += c

    def test_transmittance_monotone_and_weights_sum(self):
        rng = np.random.default_rng(1)
        n = 64
        sigma = rng.uniform(0, 5, n)
        deltas = np.full(n, 0.05)
        ids = np.zeros(n, dtype=np.int64)
        _, _, out_op, cache = composite_packed(sigma, np.ones((n, 3)), deltas,
                                               np.arange(n) * 0.05, ids, 1)
        assert (np.diff(cache.transmittance) <= 1e-15).all()
        assert 0.0 <= out_op[0] <= 1.0
        expect = 1.0 - math.exp(-(sigma * deltas).sum())
        assert out_op[0] == pytest.approx(expect, rel=1e-12)


class TestCompositeBackward:
    def test_single_sample_color_grad_is_alpha(self):
        sigma, delta = 1.3, 0.7
        _, _, _, cache = composite_packed(np.array([sigma]), np.ones((1, 3)) * 0.4,
                                          np.array([delta]), np.array([2.0]),
                                          np.zeros(1, dtype=np.int64), 1)
        d_sigma, d_rgb = composite_backward_packed(cache, np.array([[1.0, 0, 0]]),
                                                   np.zeros(1))
        alpha = 1 - math.exp(-sigma * delta)
        assert d_rgb[0, 0] == pytest.approx(alpha, rel=1e-12)
        assert d_rgb[0, 1] == 0.0

    def test_two_sample_cross_term(self):
        # d w2 / d sigma1 = -delta1 (1 - alpha1) alpha2
        s = np.array([0.8, 1.7])
        d = np.array([0.3, 0.5])
        t = np.array([1.0, 1.4])
        c = np.array([[0.0, 0, 0], [1.0, 1, 1]])  # only sample 2 carries color
        _, _, _, cache = composite_packed(s, c, d, t, np.zeros(2, np.int64), 1)
        d_sigma, _ = composite_backward_packed(cache, np.array([[1.0, 0, 0]]),
                                               np.zeros(1))
        a1 = 1 - math.exp(-s[0] * d[0])
        a2 = 1 - math.exp(-s[1] * d[1])
        assert d_sigma[0] == pytest.approx(-d[0] * (1 - a1) * a2, rel=1e-12)
        # and against central differences
        h = 1e-6
        def w2(s0):
            return (1 - math.exp(-s0 * d[0])) * 0 + math.exp(-s0 * d[0]) * a2
        fd = (w2(s[0] + h) - w2(s[0] - h)) / (2 * h)
        assert d_sigma[0] == pytest.approx(fd, rel=1e-6)

    def test_zero_upstream(self):
        rng = np.random.default_rng(2)
        n = 10
        _, _, _, cache = composite_packed(rng.uniform(0, 2, n),
                                          rng.uniform(0, 1, (n, 3)),
                                          np.full(n, 0.1), np.arange(n) * 0.1,
                                          np.zeros(n, np.int64), 1)
        d_sigma, d_rgb = composite_backward_packed(cache, np.zeros((1, 3)),
                                                   np.zeros(1))
        assert not d_sigma.any() and not d_rgb.any()

    def test_full_finite_difference_sweep(self):
        rng = np.random.default_rng(3)
        counts = [3, 4]
        ids = np.repeat(np.arange(2), counts)
        n = ids.size
        sigma = rng.uniform(0.2, 2.0, n)
        rgb = rng.uniform(0.1, 0.9, (n, 3))
        deltas = rng.uniform(0.05, 0.3, n)
        tvals = np.concatenate([np.sort(rng.uniform(0, 3, c)) for c in counts])
        d_rgb_up = rng.standard_normal((2, 3))
        d_dep_up = rng.standard_normal(2)
        d_op_up = rng.standard_normal(2)

        def loss(sig, col):
            r, d, o, _ = composite_packed(sig, col, deltas, tvals, ids, 2)
            return float((r * d_rgb_up).sum() + (d * d_dep_up).sum()
                         + (o * d_op_up).sum())

        _, _, _, cache = composite_packed(sigma, rgb, deltas, tvals, ids, 2)
        d_sigma, d_rgb = composite_backward_packed(cache, d_rgb_up, d_dep_up, d_op_up)
        h = 1e-6
        for i in range(n):
            pert = sigma.copy()
            pert[i] += h
            lp = loss(pert, rgb)
            pert[i] -= 2 * h
            lm = loss(pert, rgb)
            fd = (lp - lm) / (2 * h)
            assert d_sigma[i] == pytest.approx(fd, rel=1e-5, abs=1e-10)
            for k in range(3):
                cp = rgb.copy()
                cp[i, k] += h
                lp = loss(sigma, cp)
                cp[i, k] -= 2 * h
                lm = loss(sigma, cp)
                fd = (lp - lm) / (2 * h)
                assert d_rgb[i, k] == pytest.approx(fd, rel=1e-5, abs=1e-10)


def make_bundle(rng, levels=(4, 8), D=4, bins=4):
    cfg = EncodingConfig(bins=bins, sigma=1.0 / bins)
    planes = PlaneSet.create(levels, 4, D, rng, dtype=np.float64)
    for g in planes.dynamic_grids():
        g.values[...] = rng.uniform(0.8, 1.2, g.values.shape)
    from forplane.config import MlpConfig
    mlp = MlpParams.create(4 * bins + D, MlpConfig(), rng, dtype=np.float64)
    return FieldBundle(planes, cfg, mlp)


class TestRenderPaths:
    def test_empty_grid_renders_black(self):
        rng = np.random.default_rng(4)
        bundle = make_bundle(rng)
        grid = IndicatorGrid.create((4, 4, 4, 2), tau_occ=1.0)
        grid.density_cache[...] = 0.0
        grid.rebinarize()
        ray_origin = np.array([0.5, 0.5, -1.0])
        ray = ray_for_pixel(Camera(8, 8, 4, 4, 8, 8,
                                   np.array([[1, 0, 0, 0.5], [0, 1, 0, 0.5],
                                             [0, 0, 1, -1.0], [0, 0, 0, 1]],
                                            dtype=np.float64), 0.1, 5.0), 3, 3, 0.2)
        out = render_ray(ray, bundle, grid, steps=16)
        assert out["opacity"] == 0.0 and out["depth"] == 0.0
        np.testing.assert_array_equal(out["rgb"], np.zeros(3))
        assert np.allclose(ray_origin, ray.origin)

    def test_full_grid_equals_dense(self):
        rng = np.random.default_rng(5)
        bundle = make_bundle(rng)
        grid = IndicatorGrid.create((4, 4, 4, 2), tau_occ=0.01)
        origins = np.tile([0.5, 0.5, -1.0], (5, 1))
        dirs = rng.normal(size=(5, 3)) * np.array([0.15, 0.15, 0]) + [0, 0, 1.0]
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t0, t1, _ = clip_to_aabb(origins, dirs, (0, 0, 0), (1, 1, 1), 0.1, 5.0)
        times = rng.uniform(0, 1, 5)
        a = render_rays(bundle, grid, origins, dirs, times, t0, t1, 32,
                        t_min=0.0, use_grid=True)
        b = render_rays(bundle, None, origins, dirs, times, t0, t1, 32,
                        t_min=0.0, use_grid=False)
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, rtol=1e-12)

    def test_training_path_matches_inference_path(self):
        rng = np.random.default_rng(6)
        bundle = make_bundle(rng)
        origins = np.tile([0.5, 0.5, -1.0], (4, 1))
        dirs = np.tile([0.0, 0.0, 1.0], (4, 1)) + rng.normal(0, 0.1, (4, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t0, t1, _ = clip_to_aabb(origins, dirs, (0, 0, 0), (1, 1, 1), 0.1, 5.0)
        times = rng.uniform(0, 1, 4)
        rgb_t, dep_t, op_t, _ = render_batch_training(bundle, None, origins, dirs,
                                                      times, t0, t1, 24, jitter=False)
        rgb_e, dep_e, op_e = render_rays(bundle, None, origins, dirs, times,
                                         t0, t1, 24, t_min=0.0, use_grid=False)
        np.testing.assert_allclose(rgb_t, rgb_e, rtol=1e-10)
        np.testing.assert_allclose(dep_t, dep_e, rtol=1e-10)
        np.testing.assert_allclose(op_t, op_e, rtol=1e-10)

    def test_early_termination_bounded_error(self):
        rng = np.random.default_rng(7)
        bundle = make_bundle(rng)
        # crank densities up so transmittance actually collapses
        for g in bundle.plane_set.static_grids():
            g.values[...] = rng.uniform(1.2, 1.6, g.values.shape)
        origins = np.tile([0.5, 0.5, -1.0], (6, 1))
        dirs = np.tile([0.0, 0.0, 1.0], (6, 1)) + rng.normal(0, 0.05, (6, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t0, t1, _ = clip_to_aabb(origins, dirs, (0, 0, 0), (1, 1, 1), 0.1, 5.0)
        times = np.full(6, 0.5)
        full = render_rays(bundle, None, origins, dirs, times, t0, t1, 128,
                           t_min=0.0, use_grid=False)
        cut = render_rays(bundle, None, origins, dirs, times, t0, t1, 128,
                          t_min=1e-4, use_grid=False, block=8)
        assert np.abs(full[0] - cut[0]).max() < 2e-4

    def test_missed_rays_render_black(self):
        rng = np.random.default_rng(8)
        bundle = make_bundle(rng)
        origins = np.array([[5.0, 5.0, -1.0]])
        dirs = np.array([[0.0, 0.0, 1.0]])
        t0, t1, _ = clip_to_aabb(origins, dirs, (0, 0, 0), (1, 1, 1), 0.1, 5.0)
        rgb, dep, op = render_rays(bundle, None, origins, dirs, np.zeros(1),
                                   t0, t1, 16, use_grid=False)
        assert not rgb.any() and not dep.any() and not op.any()

    def test_eval_count_tracks_field_queries(self):
        rng = np.random.default_rng(9)
        bundle = make_bundle(rng)
        origins = np.tile([0.5, 0.5, -1.0], (3, 1))
        dirs = np.tile([0.0, 0.0, 1.0], (3, 1))
        t0, t1, _ = clip_to_aabb(origins, dirs, (0, 0, 0), (1, 1, 1), 0.1, 5.0)
        bundle.eval_count = 0
        render_rays(bundle, None, origins, dirs, np.zeros(3), t0, t1, 16,
                    use_grid=False, t_min=0.0)
        assert bundle.eval_count == 3 * 16
