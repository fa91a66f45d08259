"""Differentiable volume rendering of RGB and thermal images from a VoxelGrid.

Colors and temperatures are composited front to back with

    w_i = a_i * (1 - exp(-sigma_i * delta_i)),   a_i = exp(-sum_{j<i} sigma_j delta_j)

plus the residual transmittance times a background value: a learned
equirectangular image for RGB, and 0 (the scene minimum in normalized units)
for temperature. The scalar reference functions here operate on one ray;
:func:`render_rays` / :func:`backward_render` are the batched numba paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .camera import CameraIntrinsics, CameraPose, Ray, generate_rays, intersect_bounds
from .voxel_field import GradientBuffers, VoxelGrid, sample_trilinear

SH_C0 = _kernels.SH_C0
SH_C1 = _kernels.SH_C1
SH_C2 = (_kernels.SH_C2_0, _kernels.SH_C2_1, _kernels.SH_C2_2,
         _kernels.SH_C2_3, _kernels.SH_C2_4)

RGB = "rgb"
THERMAL = "thermal"
DEFAULT_BACKGROUND_SHAPE = (64, 128)
THERMAL_BACKGROUND = 0.0


def default_step(grid: VoxelGrid) -> float:
    """Half the smallest voxel edge."""
    return 0.5 * float(np.min(grid.voxel_size))


def sh_basis(directions) -> np.ndarray:
    """Real SH basis up to degree 2 for unit direction(s); shape ``(..., 9)``."""
    d = np.asarray(directions, dtype=float)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.stack([
        np.full_like(x, SH_C0),
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * z * z - x * x - y * y),
        SH_C2[3] * x * z,
        SH_C2[4] * (x * x - y * y),
    ], axis=-1)


def eval_sh(sh_coeffs, direction) -> np.ndarray:
    """Raw (unclamped) RGB from 27 channel-major SH coefficients."""
    coeffs = np.asarray(sh_coeffs, dtype=float).reshape(*np.shape(sh_coeffs)[:-1], 3, 9)
    return np.einsum("...cb,...b->...c", coeffs, sh_basis(direction))


def background_color(background: np.ndarray, directions) -> np.ndarray:
    """Bilinear lookup in an equirectangular ``(H, W, 3)`` image.

    Longitude ``atan2(y, x)`` spans the width (wrapping), colatitude
    ``acos(z)`` spans the height (clamped at the poles).
    """
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    H, W = background.shape[:2]
    lon = np.arctan2(d[:, 1], d[:, 0])
    lat = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    u = (lon + np.pi) / (2 * np.pi) * W - 0.5
    v = lat / np.pi * H - 0.5
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    iu0 = u0.astype(int) % W
    iu1 = (iu0 + 1) % W
    iv0 = np.clip(v0.astype(int), 0, H - 1)
    iv1 = np.clip(v0.astype(int) + 1, 0, H - 1)
    out = ((1 - fu) * (1 - fv) * background[iv0, iu0] + fu * (1 - fv) * background[iv0, iu1]
           + (1 - fu) * fv * background[iv1, iu0] + fu * fv * background[iv1, iu1])
    return out.reshape(np.shape(directions)[:-1] + (3,))


def constant_background(color, shape=DEFAULT_BACKGROUND_SHAPE) -> np.ndarray:
    return np.broadcast_to(np.asarray(color, dtype=float), tuple(shape) + (3,)).copy()


@dataclass
class RaySampleSet:
    positions: np.ndarray
    deltas: np.ndarray
    t: np.ndarray

    @property
    def count(self) -> int:
        return int(self.t.size)


def sample_ray(grid: VoxelGrid, ray: Ray, step: Optional[float] = None) -> RaySampleSet:
    """Uniform samples at ``t_near + (k + 0.5) * step`` inside the grid.

    An intersection shorter than one step yields a single midpoint sample
    whose delta is the interval length; a miss yields an empty set.
    """
    step = default_step(grid) if step is None else float(step)
    if step <= 0:
        raise ValueError("step must be positive")
    hit = intersect_bounds(ray, grid.bounds)
    if hit is None:
        return RaySampleSet(np.empty((0, 3)), np.empty(0), np.empty(0))
    t0, t1 = hit
    length = t1 - t0
    if length < step:
        t = np.array([t0 + 0.5 * length])
        deltas = np.array([length])
    else:
        n = int(np.floor(length / step + 1e-9))
        t = t0 + (np.arange(n) + 0.5) * step
        deltas = np.full(n, step)
    return RaySampleSet(ray.origin + t[:, None] * ray.direction, deltas, t)


def compositing_weights(sigmas, deltas):
    """Per-sample weights and residual transmittance for one ray."""
    tau = np.asarray(sigmas, dtype=float) * np.asarray(deltas, dtype=float)
    acc = np.concatenate([[0.0], np.cumsum(tau)])
    trans = np.exp(-acc)
    weights = trans[:-1] * (1.0 - np.exp(-tau))
    return weights, trans[-1]


def composite_color(sigmas, deltas, colors, background_color=(0.0, 0.0, 0.0)) -> np.ndarray:
    weights, residual = compositing_weights(sigmas, deltas)
    colors = np.asarray(colors, dtype=float).reshape(-1, 3)
    return weights @ colors + residual * np.asarray(background_color, dtype=float)


def composite_temperature(sigmas, deltas, temperatures, t_background: float = THERMAL_BACKGROUND) -> float:
    weights, residual = compositing_weights(sigmas, deltas)
    return float(weights @ np.asarray(temperatures, dtype=float) + residual * t_background)


def render_ray_reference(grid: VoxelGrid, ray: Ray, step=None, background=None):
    """Pure-numpy single-ray render: ``(rgb_raw, thermal)`` without clamping."""
    samples = sample_ray(grid, ray, step)
    bg = (np.asarray(background_color(background, ray.direction[None])[0])
          if background is not None else np.zeros(3))
    if samples.count == 0:
        return bg, THERMAL_BACKGROUND
    sigmas = sample_trilinear(grid, samples.positions, "density")
    temps = sample_trilinear(grid, samples.positions, "temperature")
    colors = eval_sh(sample_trilinear(grid, samples.positions, "sh"), ray.direction)
    return (composite_color(sigmas, samples.deltas, colors, bg),
            composite_temperature(sigmas, samples.deltas, temps))


# -- batched rendering --------------------------------------------------------

@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    hit: np.ndarray

    def __len__(self):
        return self.origins.shape[0]

    @classmethod
    def from_rays(cls, origins, directions, bounds) -> "RayBatch":
        origins = np.ascontiguousarray(origins, dtype=np.float64)
        directions = np.ascontiguousarray(directions, dtype=np.float64)
        t_near, t_far, hit = intersect_bounds(origins, bounds, directions)
        return cls(origins, directions, np.ascontiguousarray(t_near),
                   np.ascontiguousarray(t_far), np.ascontiguousarray(hit))

    def subset(self, index) -> "RayBatch":
        return RayBatch(self.origins[index], self.directions[index], self.t_near[index],
                        self.t_far[index], self.hit[index])


@dataclass
class RenderCache:
    """Per-ray forward outputs needed by the backward pass.

    ``rgb_raw`` is the unclamped composite including background; the
    clamped color is ``rgb``.
    """

    rgb_raw: np.ndarray
    thermal: np.ndarray
    transmittance: np.ndarray

    @property
    def rgb(self) -> np.ndarray:
        return np.clip(self.rgb_raw, 0.0, 1.0)


def _grid_args(grid: VoxelGrid):
    nx, ny, nz = grid.dims
    lo = np.ascontiguousarray(grid.bounds.lo)
    scale = np.ascontiguousarray(np.asarray(grid.dims, dtype=float) / (grid.bounds.hi - grid.bounds.lo))
    return nx, ny, nz, lo, scale


def render_rays(grid: VoxelGrid, rays: RayBatch, step=None, background=None,
                skip_empty: bool = True) -> RenderCache:
    step = default_step(grid) if step is None else float(step)
    if background is None:
        background = constant_background(0.0, (1, 1))
    n = len(rays)
    out_rgb = np.empty((n, 3))
    out_th = np.empty(n)
    out_tr = np.empty(n)
    _kernels.render_forward(grid.density, grid.sh, grid.temperature, *_grid_args(grid),
                            rays.origins, rays.directions, rays.t_near, rays.t_far, rays.hit,
                            step, np.ascontiguousarray(background, dtype=np.float64),
                            bool(skip_empty), out_rgb, out_th, out_tr)
    return RenderCache(out_rgb, out_th, out_tr)


def backward_render(grid: VoxelGrid, rays: RayBatch, cache: RenderCache, grad_rgb, grad_thermal,
                    step=None, background_shape=None, buffers: Optional[GradientBuffers] = None,
                    thermal_density_grad: bool = True, skip_empty: bool = True) -> GradientBuffers:
    """Analytic gradients of the composites w.r.t. every corner parameter.

    ``grad_rgb`` is d(loss)/d(clamped color); it is zeroed where the raw
    composite lies outside ``[0, 1]``. ``grad_thermal`` is d(loss)/d(thermal).
    """
    step = default_step(grid) if step is None else float(step)
    if buffers is None:
        buffers = grid.zeros_like_fields()
    if buffers.background is None:
        shape = background_shape or (1, 1)
        buffers.background = np.zeros(tuple(shape) + (3,))
    raw = cache.rgb_raw
    inside = (raw >= 0.0) & (raw <= 1.0)
    g_rgb = np.ascontiguousarray(np.where(inside, grad_rgb, 0.0), dtype=np.float64)
    g_th = np.ascontiguousarray(grad_thermal, dtype=np.float64).reshape(-1)
    _kernels.render_backward(grid.density, grid.sh, grid.temperature, *_grid_args(grid),
                             rays.origins, rays.directions, rays.t_near, rays.t_far, rays.hit,
                             step, bool(skip_empty), cache.rgb_raw, cache.thermal, g_rgb, g_th,
                             bool(thermal_density_grad), buffers.density, buffers.sh,
                             buffers.temperature, buffers.background)
    return buffers


@dataclass
class RenderedImage:
    channel: str
    data: np.ndarray

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def camera_rays(grid: VoxelGrid, intr: CameraIntrinsics, pose: CameraPose) -> RayBatch:
    origins, dirs = generate_rays(intr, pose)
    return RayBatch.from_rays(origins, dirs, grid.bounds)


def render_image(grid: VoxelGrid, intr: CameraIntrinsics, pose: CameraPose, channel: str = RGB,
                 step=None, background=None, skip_empty: bool = True) -> RenderedImage:
    """Render a full image; RGB is clamped to ``[0, 1]``, thermal is normalized."""
    if channel not in (RGB, THERMAL):
        raise ValueError(f"channel must be {RGB!r} or {THERMAL!r}")
    cache = render_rays(grid, camera_rays(grid, intr, pose), step, background, skip_empty)
    if channel == RGB:
        data = cache.rgb.reshape(intr.height, intr.width, 3)
    else:
        data = cache.thermal.reshape(intr.height, intr.width)
    return RenderedImage(channel, data)
