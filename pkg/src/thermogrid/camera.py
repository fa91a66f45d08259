"""Pinhole cameras, per-pixel rays and ray/box intersection.

Camera frame follows the OpenCV convention: +x right, +y down, +z forward.
Pixel ``(u, v)`` is sampled at its center ``(u + 0.5, v + 0.5)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .voxel_field import GridBounds


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> "CameraIntrinsics":
        f = 0.5 * width / np.tan(0.5 * np.radians(fov_x_deg))
        return cls(f, f, width / 2.0, height / 2.0, int(width), int(height))

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                    width=self.width, height=self.height)


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "CameraPose":
        m = np.asarray(m, dtype=float).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        eye = np.asarray(eye, dtype=float)
        forward = np.asarray(target, dtype=float) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=float))
        norm = np.linalg.norm(right)
        if norm < 1e-9:
            raise ValueError("viewing direction is parallel to the up vector")
        right /= norm
        down = np.cross(forward, right)
        return cls(np.stack([right, down, forward], axis=1), eye)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", d)


def generate_ray(intr: CameraIntrinsics, pose: CameraPose, pixel) -> Ray:
    u, v = pixel
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise ValueError(f"pixel {pixel} outside {intr.width}x{intr.height} image")
    origins, dirs = generate_rays(intr, pose, np.array([u]), np.array([v]))
    return Ray(origins[0], dirs[0])


def generate_rays(intr: CameraIntrinsics, pose: CameraPose, u=None, v=None):
    """Vectorized ray generation.

    With ``u``/``v`` omitted every pixel is generated in row-major order
    (``v`` slow, ``u`` fast). Returns ``(origins, directions)``, each ``(n, 3)``.
    """
    if u is None or v is None:
        vv, uu = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
        u, v = uu.reshape(-1), vv.reshape(-1)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    cam = np.stack([(u + 0.5 - intr.cx) / intr.fx,
                    (v + 0.5 - intr.cy) / intr.fy,
                    np.ones_like(u)], axis=-1)
    dirs = cam @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs


def intersect_bounds(ray_or_origins, bounds: GridBounds, directions=None):
    """Slab-method ray/box intersection.

    Called with a :class:`Ray` returns ``(t_near, t_far)`` or ``None`` on a
    miss. Called with arrays ``(origins, directions)`` returns arrays
    ``t_near, t_far, hit``. ``t_near`` is clamped to 0; empty or
    zero-length intervals count as misses.
    """
    single = isinstance(ray_or_origins, Ray)
    if single:
        origins = ray_or_origins.origin[None]
        directions = ray_or_origins.direction[None]
    else:
        origins = np.atleast_2d(np.asarray(ray_or_origins, dtype=float))
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (bounds.lo - origins) * inv
        t1 = (bounds.hi - origins) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # axis-parallel rays: inside the slab -> unconstrained, outside -> miss
    parallel = directions == 0.0
    inside = (origins >= bounds.lo) & (origins <= bounds.hi)
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.maximum(lo.max(axis=-1), 0.0)
    t_far = hi.min(axis=-1)
    hit = t_far > t_near
    if single:
        return (float(t_near[0]), float(t_far[0])) if hit[0] else None
    return t_near, t_far, hit


# -- pose file ---------------------------------------------------------------

POSE_FILE_VERSION = 1


@dataclass
class Frame:
    name: str
    rgb: str
    thermal: str
    pose: CameraPose


def write_poses(path, intr: CameraIntrinsics, frames: List[Frame]) -> Path:
    """Write the pose record file.

    Layout::

        {"version": 1,
         "intrinsics": {"fx", "fy", "cx", "cy", "width", "height"},
         "frames": [{"name", "rgb", "thermal", "transform_matrix": 4x4 rows}]}
    """
    doc = {
        "version": POSE_FILE_VERSION,
        "intrinsics": intr.to_dict(),
        "frames": [
            {"name": f.name, "rgb": f.rgb, "thermal": f.thermal,
             "transform_matrix": f.pose.matrix().tolist()}
            for f in frames
        ],
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


class PoseFileError(ValueError):
    pass


def read_poses(path) -> Tuple[CameraIntrinsics, List[Frame]]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        ki = doc["intrinsics"]
        intr = CameraIntrinsics(float(ki["fx"]), float(ki["fy"]), float(ki["cx"]),
                                float(ki["cy"]), int(ki["width"]), int(ki["height"]))
        frames = [Frame(str(f["name"]), str(f["rgb"]), str(f["thermal"]),
                        CameraPose.from_matrix(f["transform_matrix"]))
                  for f in doc["frames"]]
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise PoseFileError(f"unreadable pose file {path}: {exc}") from exc
    return intr, frames


def orbit_poses(n: int, radius: float, target=(0.0, 0.0, 0.0),
                elevations_deg: Optional[Tuple[float, ...]] = None) -> List[CameraPose]:
    """Cameras on a sphere around ``target``, azimuth spaced by the golden angle."""
    if elevations_deg is None:
        elevations_deg = (-30.0, 10.0, 45.0)
    target = np.asarray(target, dtype=float)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    poses = []
    for i in range(n):
        az = i * golden
        el = np.radians(elevations_deg[i % len(elevations_deg)])
        eye = target + radius * np.array([np.cos(el) * np.cos(az),
                                          np.cos(el) * np.sin(az),
                                          np.sin(el)])
        poses.append(CameraPose.look_at(eye, target))
    return poses
