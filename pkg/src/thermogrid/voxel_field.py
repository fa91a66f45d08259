"""Dense corner-valued voxel grid with trilinear sampling and gradient scatter.

Every field lives on grid corners. Corner storage is a flat array indexed
x-fastest::

    flat = i + (nx + 1) * (j + (ny + 1) * k)

so ``field.reshape(nz + 1, ny + 1, nx + 1)`` gives a ``[k, j, i]`` view.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

CHECKPOINT_VERSION = 1
SH_BASIS = 9
SH_DIM = 3 * SH_BASIS

FIELDS = ("density", "temperature", "sh")


class OutOfBoundsError(ValueError):
    """Raised when a point lies outside the grid bounds."""


@dataclass(frozen=True)
class GridBounds:
    min_corner: Tuple[float, float, float]
    max_corner: Tuple[float, float, float]

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=float)
        hi = np.asarray(self.max_corner, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("bounds corners must be 3-vectors")
        if not np.all(hi > lo):
            raise ValueError(f"max_corner {hi} must exceed min_corner {lo} on every axis")
        object.__setattr__(self, "min_corner", tuple(float(v) for v in lo))
        object.__setattr__(self, "max_corner", tuple(float(v) for v in hi))

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.min_corner)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.max_corner)

    def contains(self, p, tol: float = 0.0) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=-1)


@dataclass
class VoxelGrid:
    """Corner-valued grid holding density, SH color and normalized temperature.

    Parameters
    ----------
    dims : tuple of int
        Voxel counts per axis ``(nx, ny, nz)``; corner counts are ``dims + 1``.
    bounds : GridBounds
        World-space box covered by the grid.
    density, temperature : ndarray, shape (n_corners,)
    sh : ndarray, shape (n_corners, 27)
        Channel-major: coefficient ``b`` of channel ``c`` lives at ``c * 9 + b``.
    temp_range : (float, float)
        ``(t_min, t_max)`` in degrees C used to denormalize temperature.
    """

    dims: Tuple[int, int, int]
    bounds: GridBounds
    density: np.ndarray
    sh: np.ndarray
    temperature: np.ndarray
    temp_range: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        n = self.n_corners
        self.density = np.ascontiguousarray(self.density, dtype=np.float64).reshape(-1)
        self.temperature = np.ascontiguousarray(self.temperature, dtype=np.float64).reshape(-1)
        self.sh = np.ascontiguousarray(self.sh, dtype=np.float64).reshape(-1, SH_DIM)
        if self.density.size != n or self.temperature.size != n or self.sh.shape[0] != n:
            raise ValueError(
                f"field sizes do not match {n} corners: density={self.density.size}, "
                f"temperature={self.temperature.size}, sh={self.sh.shape}"
            )
        t_min, t_max = (float(v) for v in self.temp_range)
        if not (np.isfinite(t_min) and np.isfinite(t_max) and t_min < t_max):
            raise ValueError(f"invalid temperature range {self.temp_range}")
        self.temp_range = (t_min, t_max)

    @classmethod
    def full(cls, dims, bounds: GridBounds, density: float = 0.0, sh0: float = 0.0,
             temperature: float = 0.0, temp_range=(0.0, 1.0)) -> "VoxelGrid":
        """Grid with constant fields; ``sh0`` sets only the degree-0 coefficient."""
        n = int(np.prod(np.asarray(dims) + 1))
        sh = np.zeros((n, SH_DIM))
        sh[:, 0::SH_BASIS] = sh0
        return cls(dims, bounds, np.full(n, float(density)), sh,
                   np.full(n, float(temperature)), temp_range)

    @property
    def corner_shape(self) -> Tuple[int, int, int]:
        nx, ny, nz = self.dims
        return (nx + 1, ny + 1, nz + 1)

    @property
    def n_corners(self) -> int:
        return int(np.prod(self.corner_shape))

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.bounds.hi - self.bounds.lo) / np.asarray(self.dims)

    def field(self, name: str) -> np.ndarray:
        if name not in FIELDS:
            raise KeyError(f"unknown field {name!r}; expected one of {FIELDS}")
        return getattr(self, name)

    def volume(self, name: str) -> np.ndarray:
        """Field reshaped to ``[k, j, i(, c)]`` (a view, not a copy)."""
        nx, ny, nz = self.dims
        values = self.field(name)
        shape = (nz + 1, ny + 1, nx + 1) + values.shape[1:]
        return values.reshape(shape)

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.dims, self.bounds, self.density.copy(), self.sh.copy(),
                         self.temperature.copy(), self.temp_range)

    def zeros_like_fields(self) -> "GradientBuffers":
        return GradientBuffers(
            density=np.zeros_like(self.density),
            sh=np.zeros_like(self.sh),
            temperature=np.zeros_like(self.temperature),
        )

    def denormalize(self, t: np.ndarray) -> np.ndarray:
        t_min, t_max = self.temp_range
        return t_min + np.asarray(t) * (t_max - t_min)


@dataclass
class GradientBuffers:
    """Per-corner gradient accumulators, kept apart from parameter storage."""

    density: np.ndarray
    sh: np.ndarray
    temperature: np.ndarray
    background: Optional[np.ndarray] = None

    def field(self, name: str) -> np.ndarray:
        return getattr(self, name)


def corner_index(dims, i, j, k):
    """Flat index of corner ``(i, j, k)`` for a grid with voxel ``dims``."""
    nx, ny, _ = dims
    return i + (nx + 1) * (j + (ny + 1) * k)


def world_to_grid(grid: VoxelGrid, p) -> np.ndarray:
    """Affine map of world points onto ``[0, dims]`` per axis.

    Points outside the bounds map outside that range; no clipping happens here.
    """
    p = np.asarray(p, dtype=float)
    lo, hi = grid.bounds.lo, grid.bounds.hi
    return (p - lo) / (hi - lo) * np.asarray(grid.dims, dtype=float)


def trilinear_stencil(grid: VoxelGrid, p, tol: float = 1e-9):
    """Corner indices and weights of the cell enclosing each point.

    Returns
    -------
    idx : ndarray of int, shape (..., 8)
    weights : ndarray, shape (..., 8)
        Non-negative, summing to one. Corner order is ``(di, dj, dk)`` with
        ``di`` fastest: 000, 100, 010, 110, 001, 101, 011, 111.
    """
    g = world_to_grid(grid, p)
    dims = np.asarray(grid.dims, dtype=float)
    if np.any(g < -tol) or np.any(g > dims + tol):
        raise OutOfBoundsError("point outside grid bounds; clip rays to the grid first")
    g = np.clip(g, 0.0, dims)
    cell = np.minimum(np.floor(g), dims - 1).astype(np.int64)
    frac = g - cell
    i, j, k = cell[..., 0], cell[..., 1], cell[..., 2]
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
    idx = []
    weights = []
    for dk in (0, 1):
        wz = fz if dk else 1.0 - fz
        for dj in (0, 1):
            wy = fy if dj else 1.0 - fy
            for di in (0, 1):
                wx = fx if di else 1.0 - fx
                idx.append(corner_index(grid.dims, i + di, j + dj, k + dk))
                weights.append(wx * wy * wz)
    return np.stack(idx, axis=-1), np.stack(weights, axis=-1)


def sample_trilinear(grid: VoxelGrid, p, field: str = "density"):
    """Trilinearly interpolate ``field`` at world point(s) ``p``.

    Scalar fields return shape ``p.shape[:-1]``; ``"sh"`` appends a trailing
    axis of 27. Raises :class:`OutOfBoundsError` for points outside the grid.
    """
    values = grid.field(field)
    idx, w = trilinear_stencil(grid, p)
    if values.ndim == 1:
        return np.sum(values[idx] * w, axis=-1)
    return np.sum(values[idx] * w[..., None], axis=-2)


def scatter_gradient(grid: VoxelGrid, p, field: str, upstream, buffer: np.ndarray) -> None:
    """Accumulate ``upstream * weight`` into the 8 enclosing corners of each point.

    The adjoint of :func:`sample_trilinear`. ``np.add.at`` keeps repeated
    corner indices correct and the sum order deterministic.
    """
    idx, w = trilinear_stencil(grid, p)
    upstream = np.asarray(upstream, dtype=float)
    if buffer.ndim == 1:
        contrib = np.broadcast_to(upstream, w.shape[:-1])[..., None] * w
        np.add.at(buffer, idx.reshape(-1), contrib.reshape(-1))
    else:
        up = np.broadcast_to(upstream, w.shape[:-1] + buffer.shape[1:])
        contrib = w[..., None] * up[..., None, :]
        np.add.at(buffer, idx.reshape(-1), contrib.reshape(-1, buffer.shape[1]))


def save_checkpoint(path, grid: VoxelGrid, background: Optional[np.ndarray] = None, **extra) -> Path:
    """Write a grid to a versioned ``.npz`` container.

    ``extra`` entries are stored as JSON under ``meta`` (config echo, seed,
    loss history, ...).
    """
    path = Path(path)
    payload = dict(
        version=np.int64(CHECKPOINT_VERSION),
        dims=np.asarray(grid.dims, dtype=np.int64),
        bounds_min=np.asarray(grid.bounds.min_corner),
        bounds_max=np.asarray(grid.bounds.max_corner),
        temp_range=np.asarray(grid.temp_range),
        density=grid.density,
        sh=grid.sh,
        temperature=grid.temperature,
        index_order=np.array("x-fastest"),
        meta=np.array(json.dumps(extra, sort_keys=True)),
    )
    if background is not None:
        payload["background"] = np.asarray(background, dtype=np.float64)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(grid, background, meta)``."""
    with np.load(Path(path), allow_pickle=False) as data:
        if "version" not in data.files:
            raise ValueError(f"{path}: not a grid checkpoint (no version field)")
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        grid = VoxelGrid(
            dims=tuple(int(d) for d in data["dims"]),
            bounds=GridBounds(tuple(data["bounds_min"]), tuple(data["bounds_max"])),
            density=data["density"],
            sh=data["sh"],
            temperature=data["temperature"],
            temp_range=tuple(data["temp_range"]),
        )
        background = data["background"] if "background" in data.files else None
        meta = json.loads(str(data["meta"]))
    return grid, background, meta
