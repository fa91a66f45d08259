"""Image losses and corner-field total variation with analytic gradients."""

from __future__ import annotations

import math

import numpy as np
from numba import njit


def _check_shapes(rendered, truth):
    rendered = np.asarray(rendered, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if rendered.shape != truth.shape:
        raise ValueError(f"shape mismatch: rendered {rendered.shape} vs truth {truth.shape}")
    return rendered, truth


def rgb_l2_loss(rendered, truth) -> float:
    """Mean squared error over all pixels and channels."""
    rendered, truth = _check_shapes(rendered, truth)
    return float(np.mean((rendered - truth) ** 2))


def rgb_l2_grad(rendered, truth) -> np.ndarray:
    rendered, truth = _check_shapes(rendered, truth)
    return 2.0 * (rendered - truth) / rendered.size


def thermal_data_loss(rendered, truth, lam: float = 0.5) -> float:
    """``lam * MSE + (1 - lam) * MAE`` on normalized thermal values."""
    rendered, truth = _check_shapes(rendered, truth)
    diff = rendered - truth
    return float(lam * np.mean(diff ** 2) + (1.0 - lam) * np.mean(np.abs(diff)))


def thermal_data_terms(rendered, truth):
    rendered, truth = _check_shapes(rendered, truth)
    diff = rendered - truth
    return float(np.mean(diff ** 2)), float(np.mean(np.abs(diff)))


def thermal_data_grad(rendered, truth, lam: float = 0.5) -> np.ndarray:
    rendered, truth = _check_shapes(rendered, truth)
    diff = rendered - truth
    return (lam * 2.0 * diff + (1.0 - lam) * np.sign(diff)) / diff.size


@njit(cache=True)
def _tv_kernel(vol, scale, grad, want_grad):
    nz, ny, nx, nc = vol.shape
    total = 0.0
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                for d in range(nc):
                    v = vol[k, j, i, d]
                    dx = vol[k, j, i + 1, d] - v if i + 1 < nx else 0.0
                    dy = vol[k, j + 1, i, d] - v if j + 1 < ny else 0.0
                    dz = vol[k + 1, j, i, d] - v if k + 1 < nz else 0.0
                    norm = math.sqrt(dx * dx + dy * dy + dz * dz)
                    total += norm
                    if want_grad and norm > 0.0:
                        s = scale / norm
                        grad[k, j, i, d] -= s * (dx + dy + dz)
                        if i + 1 < nx:
                            grad[k, j, i + 1, d] += s * dx
                        if j + 1 < ny:
                            grad[k, j + 1, i, d] += s * dy
                        if k + 1 < nz:
                            grad[k + 1, j, i, d] += s * dz
    return total


def _as_volume(field: np.ndarray, corner_shape) -> np.ndarray:
    nx1, ny1, nz1 = corner_shape
    field = np.ascontiguousarray(field, dtype=np.float64)
    n_comp = field.size // (nx1 * ny1 * nz1)
    return field.reshape(nz1, ny1, nx1, n_comp)


def tv_loss(field: np.ndarray, corner_shape) -> float:
    """Total variation of a corner field, averaged over all corners.

    For every corner and every component, the forward differences to the
    +x, +y, +z neighbours enter ``sqrt(dx^2 + dy^2 + dz^2)``; differences
    toward missing neighbours on the far boundary are 0. The sum is divided
    by the number of corners.

    ``field`` is a flat corner array (``n_corners`` or ``(n_corners, D)``)
    in x-fastest order; ``corner_shape`` is ``(nx+1, ny+1, nz+1)``.
    """
    vol = _as_volume(field, corner_shape)
    n = vol.shape[0] * vol.shape[1] * vol.shape[2]
    return _tv_kernel(vol, 0.0, np.empty((1, 1, 1, 1)), False) / n


def tv_loss_and_grad(field: np.ndarray, corner_shape, weight: float, grad_out: np.ndarray) -> float:
    """Return ``tv_loss`` and add ``weight * d(tv)/d(field)`` into ``grad_out``."""
    vol = _as_volume(field, corner_shape)
    n = vol.shape[0] * vol.shape[1] * vol.shape[2]
    gvol = grad_out.reshape(vol.shape)
    if not np.shares_memory(gvol, grad_out):
        raise ValueError("grad_out must be a contiguous corner array")
    return _tv_kernel(vol, weight / n, gvol, weight != 0.0) / n
