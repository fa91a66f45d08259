"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import math

import numpy as np

from .mesh import VolumetricMesh
from .scene_io import Scene, SceneError
from .voxel_field import VoxelGrid


def check_percent(t_percent) -> float:
    t = float(t_percent)
    if not (math.isfinite(t) and 0.0 < t <= 100.0):
        raise ValueError(f"t_percent must lie in (0, 100], got {t_percent}")
    return t


def check_scene(scene, require_test: bool = False) -> Scene:
    if not isinstance(scene, Scene):
        raise TypeError(f"expected a Scene, got {type(scene).__name__}")
    if not scene.train:
        raise SceneError("scene has no training views")
    if require_test and not scene.test:
        raise SceneError("scene has no held-out views")
    return scene


def check_grid(grid) -> VoxelGrid:
    if not isinstance(grid, VoxelGrid):
        raise TypeError(f"expected a VoxelGrid, got {type(grid).__name__}")
    for name in ("density", "sh", "temperature"):
        if not np.all(np.isfinite(grid.field(name))):
            raise ValueError(f"grid field {name} has non-finite values")
    if np.any(grid.density < 0):
        raise ValueError("grid density must be non-negative")
    return grid


def check_mesh(mesh) -> VolumetricMesh:
    if not isinstance(mesh, VolumetricMesh):
        raise TypeError(f"expected a VolumetricMesh, got {type(mesh).__name__}")
    if mesh.n_cells == 0:
        raise ValueError("mesh has no cells")
    if mesh.cells.min() < 0 or mesh.cells.max() >= mesh.n_nodes:
        raise ValueError("cell connectivity references missing nodes")
    if not np.all(np.isfinite(mesh.cell_temperature)):
        raise ValueError("mesh has non-finite cell temperatures")
    return mesh


def check_positive(name: str, value) -> float:
    v = float(value)
    if not (math.isfinite(v) and v > 0):
        raise ValueError(f"{name} must be finite and positive, got {value}")
    return v
