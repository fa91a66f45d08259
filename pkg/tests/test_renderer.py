import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from thermogrid.camera import CameraIntrinsics, CameraPose, Ray
from thermogrid.renderer import (SH_C0, RayBatch, backward_render, background_color, composite_color,
                                 composite_temperature, compositing_weights, constant_background,
                                 eval_sh, render_image, render_ray_reference, render_rays, sample_ray,
                                 sh_basis)
from thermogrid.scene_io import Box, SyntheticSpec, truth_grid
from thermogrid.voxel_field import GridBounds, VoxelGrid

from conftest import random_grid

# hand expansion of the compositing sum for sigma*delta = 0.5, 1, 2
W1 = 0.3934693402873666   # 1 - e^-0.5
W2 = 0.3834004995642036   # e^-0.5 (1 - e^-1)
W3 = 0.1929327767261113   # e^-1.5 (1 - e^-2)
RESIDUAL = 0.0301973834223185  # e^-3.5


def test_three_sample_hand_expansion():
    colors = np.eye(3)
    out = composite_color([0.5, 1.0, 2.0], [1.0, 1.0, 1.0], colors, (0.0, 0.0, 0.0))
    assert np.allclose(out, [W1, W2, W3], atol=1e-15)
    w, res = compositing_weights([0.5, 1.0, 2.0], [1.0, 1.0, 1.0])
    assert res == pytest.approx(RESIDUAL, abs=1e-15)


def test_transparent_samples_show_background():
    out = composite_color(np.zeros(5), np.full(5, 0.1), np.random.default_rng(0).uniform(size=(5, 3)),
                          (0.2, 0.4, 0.6))
    assert np.array_equal(out, [0.2, 0.4, 0.6])
    assert composite_temperature(np.zeros(4), np.ones(4), np.ones(4)) == 0.0


@given(st.lists(st.floats(0.0, 50.0), min_size=1, max_size=30), st.floats(1e-3, 0.5))
def test_weights_and_residual_sum_to_one(sigmas, delta):
    w, res = compositing_weights(sigmas, np.full(len(sigmas), delta))
    assert np.all(w >= 0) and abs(w.sum() + res - 1.0) < 1e-12


@given(st.lists(st.tuples(st.floats(0.0, 20.0), st.floats(0.0, 1.0)), min_size=1, max_size=20))
def test_thermal_composite_in_convex_hull(samples):
    sig = np.array([s for s, _ in samples])
    temps = np.array([t for _, t in samples])
    t = composite_temperature(sig, np.full(len(sig), 0.05), temps)
    assert min(temps.min(), 0.0) - 1e-12 <= t <= max(temps.max(), 0.0) + 1e-12


def test_sh_basis_constants():
    b = sh_basis(np.array([0.0, 0.0, 1.0]))
    assert b[0] == pytest.approx(0.5 / math.sqrt(math.pi))
    assert b[2] == pytest.approx(math.sqrt(3 / (4 * math.pi)))
    assert b[6] == pytest.approx(0.25 * math.sqrt(5 / math.pi) * 2.0)


def test_degree_zero_sh_is_view_independent():
    coeffs = np.zeros(27)
    coeffs[[0, 9, 18]] = np.array([0.2, 0.5, 0.9]) / SH_C0
    dirs = np.random.default_rng(3).normal(size=(10, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    assert np.allclose(eval_sh(np.broadcast_to(coeffs, (10, 27)), dirs), [0.2, 0.5, 0.9])


def test_sample_ray_spacing():
    grid = VoxelGrid.full((4, 4, 4), GridBounds((0, 0, 0), (1, 1, 1)))
    s = sample_ray(grid, Ray([-1.0, 0.5, 0.5], [1.0, 0.0, 0.0]), 0.125)
    assert s.count == 8 and np.allclose(s.t, 1.0 + (np.arange(8) + 0.5) * 0.125)
    assert np.allclose(s.deltas, 0.125)


def test_short_interval_gives_single_midpoint_sample():
    grid = VoxelGrid.full((4, 4, 4), GridBounds((0, 0, 0), (1, 1, 1)))
    s = sample_ray(grid, Ray([0.95, 0.5, 0.5], [1.0, 0.0, 0.0]), 0.125)
    assert s.count == 1 and s.deltas[0] == pytest.approx(0.05) and s.t[0] == pytest.approx(0.025)


def test_miss_renders_background(rng):
    grid = random_grid(rng)
    bg = constant_background((0.3, 0.2, 0.1), (4, 8))
    rgb, th = render_ray_reference(grid, Ray([5.0, 5.0, 5.0], [1.0, 0.0, 0.0]), background=bg)
    assert np.allclose(rgb, [0.3, 0.2, 0.1]) and th == 0.0


def test_background_lookup_is_bilinear_and_wraps():
    bg = np.zeros((2, 4, 3))
    bg[:, 0] = 1.0
    # longitude -pi sits on the seam between the first and last columns
    assert background_color(bg, np.array([[-1.0, -1e-12, 0.0]]))[0, 0] == pytest.approx(0.5)


def test_empty_grid_renders_constant_image():
    grid = VoxelGrid.full((4, 4, 4), GridBounds((-1, -1, -1), (1, 1, 1)))
    intr = CameraIntrinsics.from_fov(6, 6, 50)
    img = render_image(grid, intr, CameraPose.look_at([3, 1, 1], [0, 0, 0]), "rgb",
                       background=constant_background((0.25, 0.5, 0.75))).data
    assert np.allclose(img, [0.25, 0.5, 0.75])


def test_opaque_slab_shows_its_color():
    spec = SyntheticSpec(primitives=[Box((-0.5, -0.5, -0.125), (0.5, 0.5, 0.125), 200.0,
                                         (0.8, 0.45, 0.2), 40.0)], dims=(32, 32, 32))
    grid = truth_grid(spec)
    intr = CameraIntrinsics.from_fov(16, 16, 30.0)
    pose = CameraPose.look_at([0.0, 0.001, 3.0], [0, 0, 0], up=(0, 1, 0))
    img = render_image(grid, intr, pose, "rgb", background=constant_background(0.1)).data
    th = render_image(grid, intr, pose, "thermal").data
    assert np.allclose(img[6:10, 6:10], [0.8, 0.45, 0.2], atol=1e-3)
    assert np.allclose(th[6:10, 6:10], 1.0, atol=1e-3)


def _rays_for(grid, rng, n=40):
    o = rng.normal(size=(n, 3))
    o = 3.0 * o / np.linalg.norm(o, axis=1, keepdims=True)
    d = rng.uniform(-0.6, 0.6, (n, 3)) - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return RayBatch.from_rays(o, d, grid.bounds)


def test_batched_render_matches_reference(rng):
    grid = random_grid(rng)
    bg = rng.uniform(size=(4, 8, 3))
    rays = _rays_for(grid, rng)
    cache = render_rays(grid, rays, 0.1, bg)
    for n in range(len(rays)):
        rgb, th = render_ray_reference(grid, Ray(rays.origins[n], rays.directions[n]), 0.1, bg)
        assert np.allclose(cache.rgb_raw[n], rgb, atol=1e-10)
        assert cache.thermal[n] == pytest.approx(th, abs=1e-10)


def test_empty_skipping_does_not_change_images(rng):
    grid = random_grid(rng, dims=(6, 6, 6))
    vol = grid.volume("density")
    vol[:, :, :3] = 0.0
    rays = _rays_for(grid, rng, 60)
    bg = rng.uniform(size=(4, 8, 3))
    a = render_rays(grid, rays, 0.07, bg, skip_empty=True)
    b = render_rays(grid, rays, 0.07, bg, skip_empty=False)
    assert np.allclose(a.rgb_raw, b.rgb_raw, atol=1e-14) and np.allclose(a.thermal, b.thermal, atol=1e-14)


def _fd_check(grid, bg, rays, g_rgb, g_th, step, rel, rng, n_params=30):
    def objective():
        c = render_rays(grid, rays, step, bg)
        return float(np.sum(g_rgb * c.rgb) + np.sum(g_th * c.thermal))

    cache = render_rays(grid, rays, step, bg)
    buf = backward_render(grid, rays, cache, g_rgb, g_th, step, bg.shape[:2])
    targets = [("density", grid.density, buf.density), ("sh", grid.sh, buf.sh),
               ("temperature", grid.temperature, buf.temperature), ("background", bg, buf.background)]
    worst = 0.0
    for name, values, grad in targets:
        flat, gflat = values.reshape(-1), grad.reshape(-1)
        touched = np.flatnonzero(gflat)
        for n in rng.choice(touched, min(n_params, touched.size), replace=False):
            h = 1e-4
            old = flat[n]
            flat[n] = old + h
            fp = objective()
            flat[n] = old - h
            fm = objective()
            flat[n] = old
            fd = (fp - fm) / (2 * h)
            err = abs(gflat[n] - fd) / max(abs(fd), 1e-6)
            worst = max(worst, err)
    assert worst < rel, worst


def test_single_ray_gradients_match_finite_differences(rng):
    grid = random_grid(rng, dims=(4, 4, 4))
    grid.sh[:] *= 0.1
    bg = rng.uniform(0.2, 0.8, size=(4, 8, 3))
    rays = _rays_for(grid, rng, 1)
    _fd_check(grid, bg, rays, rng.normal(size=(1, 3)), rng.normal(size=1), 0.13, 1e-4, rng)


def test_two_sample_temperature_gradient_hand_derivation():
    # uniform sigma in one voxel, two samples of length 0.5 along x
    grid = VoxelGrid.full((1, 1, 1), GridBounds((0, 0, 0), (1, 1, 1)), density=1.3)
    vol = grid.volume("temperature")
    vol[..., 0], vol[..., 1] = 0.2, 0.6   # T(x) = 0.2 + 0.4 x
    t1, t2 = 0.3, 0.5                    # sample temperatures at x = 0.25, 0.75
    rays = RayBatch.from_rays(np.array([[-1.0, 0.5, 0.5]]), np.array([[1.0, 0.0, 0.0]]), grid.bounds)
    cache = render_rays(grid, rays, 0.5)
    buf = backward_render(grid, rays, cache, np.zeros((1, 3)), np.ones(1), 0.5, (1, 1))
    a = b = 1.3 * 0.5
    d_a = math.exp(-a) * t1 - math.exp(-a) * (1 - math.exp(-b)) * t2
    d_b = math.exp(-a - b) * t2
    assert buf.density.sum() == pytest.approx(0.5 * (d_a + d_b), abs=1e-12)
    # a sample at the background temperature adds nothing through its own sigma
    grid.temperature[:] = 0.0
    cache = render_rays(grid, rays, 0.5)
    buf = backward_render(grid, rays, cache, np.zeros((1, 3)), np.ones(1), 0.5, (1, 1))
    assert np.allclose(buf.density, 0.0)


def test_rgb_gradient_masked_outside_unit_range():
    grid = VoxelGrid.full((1, 1, 1), GridBounds((0, 0, 0), (1, 1, 1)), density=5.0, sh0=10.0)
    rays = RayBatch.from_rays(np.array([[-1.0, 0.5, 0.5]]), np.array([[1.0, 0.0, 0.0]]), grid.bounds)
    cache = render_rays(grid, rays, 0.25)
    assert np.all(cache.rgb_raw > 1.0) and np.all(cache.rgb == 1.0)
    buf = backward_render(grid, rays, cache, np.ones((1, 3)), np.zeros(1), 0.25, (1, 1))
    assert not buf.sh.any() and not buf.density.any()
