"""Paired RGB + thermal datasets on disk, plus synthetic scene generation.

Dataset layout::

    <root>/
      rgb/NNN.png        8-bit RGB
      thermal/NNN.png    16-bit grayscale, normalized temperature * 65535
      poses.json         see camera.write_poses
      meta.json          {"version", "t_min", "t_max", "train", "test",
                          "bounds": {"min", "max"}}

Temperatures are normalized as ``(T - t_min) / (t_max - t_min)`` with the
scene-wide range from ``meta.json``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics, CameraPose, Frame, orbit_poses, read_poses, write_poses
from .renderer import RGB, THERMAL, SH_C0, constant_background, render_image
from .voxel_field import SH_BASIS, GridBounds, VoxelGrid, save_checkpoint

META_VERSION = 1
THERMAL_SCALE = 65535


class SceneError(ValueError):
    """Base class for dataset problems."""


class MissingPairError(SceneError):
    pass


class TemperatureRangeError(SceneError):
    pass


class ImageSizeError(SceneError):
    pass


def normalize_temperature(t_celsius, temp_range) -> np.ndarray:
    t_min, t_max = temp_range
    return (np.asarray(t_celsius, dtype=float) - t_min) / (t_max - t_min)


def denormalize_temperature(t_norm, temp_range) -> np.ndarray:
    t_min, t_max = temp_range
    return t_min + np.asarray(t_norm, dtype=float) * (t_max - t_min)


# -- image codecs -------------------------------------------------------------

def encode_rgb(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_thermal(t_norm: np.ndarray) -> np.ndarray:
    return np.round(np.clip(t_norm, 0.0, 1.0) * THERMAL_SCALE).astype(np.uint16)


def write_rgb_png(path, rgb: np.ndarray) -> Path:
    Image.fromarray(encode_rgb(rgb), mode="RGB").save(path)
    return Path(path)


def write_thermal_png(path, t_norm: np.ndarray) -> Path:
    Image.fromarray(encode_thermal(t_norm)).save(path)
    return Path(path)


def read_rgb_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_thermal_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype != np.uint16:
        arr = arr.astype(np.uint16)
    return arr.astype(np.float64) / THERMAL_SCALE


def write_thermal_text(path, t_celsius: np.ndarray) -> Path:
    np.savetxt(path, np.asarray(t_celsius), fmt="%.6f")
    return Path(path)


# -- scenes -------------------------------------------------------------------

@dataclass
class ImagePair:
    name: str
    pose: CameraPose
    rgb: np.ndarray
    thermal: np.ndarray
    rgb_path: Optional[Path] = None
    thermal_path: Optional[Path] = None


@dataclass
class Scene:
    intrinsics: CameraIntrinsics
    pairs: Dict[str, ImagePair]
    temp_range: Tuple[float, float]
    train: List[str]
    test: List[str]
    bounds: GridBounds
    root: Optional[Path] = None

    def split(self, which: str) -> List[ImagePair]:
        names = {"train": self.train, "test": self.test}[which]
        return [self.pairs[n] for n in names]


def load_scene(root) -> Scene:
    """Load and validate a dataset directory."""
    root = Path(root)
    meta_path = root / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
        t_min, t_max = float(meta["t_min"]), float(meta["t_max"])
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise SceneError(f"unreadable metadata file {meta_path}: {exc}") from exc
    if not (np.isfinite(t_min) and np.isfinite(t_max) and t_min < t_max):
        raise TemperatureRangeError(f"invalid temperature range t_min={t_min}, t_max={t_max}")
    intr, frames = read_poses(root / "poses.json")
    b = meta.get("bounds", {"min": [-1.0] * 3, "max": [1.0] * 3})
    bounds = GridBounds(tuple(b["min"]), tuple(b["max"]))
    pairs: Dict[str, ImagePair] = {}
    for fr in frames:
        rgb_path, th_path = root / fr.rgb, root / fr.thermal
        if not rgb_path.is_file():
            raise MissingPairError(f"missing rgb pair for {fr.name}")
        if not th_path.is_file():
            raise MissingPairError(f"missing thermal pair for {fr.name}")
        rgb = read_rgb_png(rgb_path)
        th = read_thermal_png(th_path)
        expected = (intr.height, intr.width)
        if rgb.shape[:2] != expected or th.shape != expected:
            raise ImageSizeError(f"image size mismatch for {fr.name}: rgb {rgb.shape[:2]}, "
                                 f"thermal {th.shape}, expected {expected}")
        pairs[fr.name] = ImagePair(fr.name, fr.pose, rgb, th, rgb_path, th_path)
    train = list(meta.get("train", list(pairs)))
    test = list(meta.get("test", []))
    for name in train + test:
        if name not in pairs:
            raise MissingPairError(f"split references unknown frame {name}")
    return Scene(intr, pairs, (t_min, t_max), train, test, bounds, root)


def write_scene(root, intr: CameraIntrinsics, frames: Sequence[Tuple[str, CameraPose, np.ndarray, np.ndarray]],
                temp_range, train: Sequence[str], test: Sequence[str], bounds: GridBounds) -> List[Path]:
    """Write ``(name, pose, rgb, thermal_normalized)`` frames; returns written paths."""
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "thermal").mkdir(parents=True, exist_ok=True)
    written = []
    records = []
    for name, pose, rgb, th in frames:
        rp, tp = f"rgb/{name}.png", f"thermal/{name}.png"
        written.append(write_rgb_png(root / rp, rgb))
        written.append(write_thermal_png(root / tp, th))
        records.append(Frame(name, rp, tp, pose))
    written.append(write_poses(root / "poses.json", intr, records))
    meta = {
        "version": META_VERSION,
        "t_min": float(temp_range[0]),
        "t_max": float(temp_range[1]),
        "train": list(train),
        "test": list(test),
        "bounds": {"min": list(bounds.min_corner), "max": list(bounds.max_corner)},
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    written.append(root / "meta.json")
    return written


# -- synthetic scenes ---------------------------------------------------------

@dataclass
class Box:
    """Axis-aligned primitive with uniform density, color and temperature (C)."""

    min_corner: Tuple[float, float, float]
    max_corner: Tuple[float, float, float]
    density: float
    color: Tuple[float, float, float]
    temperature: float


@dataclass
class SyntheticSpec:
    primitives: List[Box] = field(default_factory=list)
    dims: Tuple[int, int, int] = (64, 64, 64)
    bounds: GridBounds = field(default_factory=lambda: GridBounds((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)))
    temp_range: Tuple[float, float] = (20.0, 40.0)
    n_train: int = 20
    n_test: int = 5
    width: int = 64
    height: int = 64
    fov_deg: float = 40.0
    orbit_radius: float = 4.0
    elevations_deg: Tuple[float, ...] = (-35.0, 5.0, 40.0)
    background_color: Tuple[float, float, float] = (0.1, 0.1, 0.1)
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for p in self.primitives:
            if not (self.bounds.contains(p.min_corner) and self.bounds.contains(p.max_corner)):
                raise ValueError(f"primitive {p} extends outside the grid bounds")
        if self.temp_range[0] >= self.temp_range[1]:
            raise TemperatureRangeError("t_min must be below t_max")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("dims", "temp_range", "n_train", "n_test", "width", "height",
                                           "fov_deg", "orbit_radius", "elevations_deg",
                                           "background_color", "noise", "seed")}
        d["bounds"] = {"min": list(self.bounds.min_corner), "max": list(self.bounds.max_corner)}
        d["primitives"] = [vars(p) for p in self.primitives]
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "bounds" in d:
            d["bounds"] = GridBounds(tuple(d["bounds"]["min"]), tuple(d["bounds"]["max"]))
        d["primitives"] = [Box(tuple(p["min_corner"]), tuple(p["max_corner"]), float(p["density"]),
                               tuple(p["color"]), float(p["temperature"]))
                           for p in d.get("primitives", [])]
        for key in ("dims", "temp_range", "elevations_deg", "background_color"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def slab_spec(**overrides) -> SyntheticSpec:
    """Single opaque slab at 40 C in a 20-40 C scene, the reference test scene."""
    slab = Box((-0.5, -0.5, -0.125), (0.5, 0.5, 0.125), density=200.0,
               color=(0.8, 0.45, 0.2), temperature=40.0)
    params = dict(primitives=[slab])
    params.update(overrides)
    return SyntheticSpec(**params)


def truth_grid(spec: SyntheticSpec) -> VoxelGrid:
    """Corner grid whose non-empty voxels are exactly the primitive's voxels.

    Density is set on corners strictly inside a primitive, so for a box
    aligned to voxel faces the voxels with positive center density are the
    voxels inside the box and nothing outside. Color and temperature cover
    the box plus a one-voxel shell, so samples in the density ramp near the
    surface see the primitive's own values instead of a blend with empty
    space. Later primitives overwrite earlier ones; remaining corners are
    empty (zero density, zero color, scene-minimum temperature).
    """
    grid = VoxelGrid.full(spec.dims, spec.bounds, temp_range=spec.temp_range)
    nx, ny, nz = spec.dims
    kk, jj, ii = np.meshgrid(np.arange(nz + 1), np.arange(ny + 1), np.arange(nx + 1), indexing="ij")
    pos = spec.bounds.lo + np.stack([ii, jj, kk], axis=-1).reshape(-1, 3) * grid.voxel_size
    eps = 1e-9
    shell = grid.voxel_size + eps

    def within(p, pad):
        return np.all((pos >= np.asarray(p.min_corner) - pad) & (pos <= np.asarray(p.max_corner) + pad), axis=1)

    for p in spec.primitives:
        near = within(p, shell)
        grid.sh[near] = 0.0
        grid.sh[np.ix_(near, np.arange(3) * SH_BASIS)] = np.asarray(p.color) / SH_C0
        grid.temperature[near] = normalize_temperature(p.temperature, spec.temp_range)
    for p in spec.primitives:
        grid.density[within(p, -eps)] = p.density
    return grid


def truth_voxels(spec: SyntheticSpec):
    """Non-empty voxels of :func:`truth_grid` with their center temperatures (C).

    Indices are ``(i, j, k)`` in lexicographic order.
    """
    from .mesh import sample_cell_centers

    samples = sample_cell_centers(truth_grid(spec))
    keep = samples.density > 0
    return samples.index[keep], samples.temperature[keep]


def synthetic_cameras(spec: SyntheticSpec):
    n = spec.n_train + spec.n_test
    intr = CameraIntrinsics.from_fov(spec.width, spec.height, spec.fov_deg)
    center = 0.5 * (spec.bounds.lo + spec.bounds.hi)
    poses = orbit_poses(n, spec.orbit_radius, center, spec.elevations_deg)
    names = [f"{i:03d}" for i in range(n)]
    # spread held-out views evenly through the orbit
    test_idx = set(np.linspace(0, n - 1, spec.n_test, dtype=int).tolist()) if spec.n_test else set()
    train = [nm for i, nm in enumerate(names) if i not in test_idx]
    test = [nm for i, nm in enumerate(names) if i in test_idx]
    return intr, list(zip(names, poses)), train, test


@dataclass
class SyntheticResult:
    scene: Scene
    grid: VoxelGrid
    paths: List[Path]


def generate_synthetic(spec: SyntheticSpec, out_dir) -> SyntheticResult:
    """Render a primitive scene from an orbit and write a loadable dataset.

    Alongside the dataset, ``truth_grid.npz`` holds the generating grid and
    ``truth_mesh.vtk`` its non-empty voxels.
    """
    from .mesh import voxel_mesh, write_vtk

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = truth_grid(spec)
    background = constant_background(spec.background_color)
    intr, cams, train, test = synthetic_cameras(spec)
    rng = np.random.default_rng(spec.seed)
    frames = []
    for name, pose in cams:
        rgb = render_image(grid, intr, pose, RGB, background=background).data
        th = render_image(grid, intr, pose, THERMAL, background=background).data
        if spec.noise > 0:
            rgb = rgb + rng.normal(0.0, spec.noise, rgb.shape)
            th = th + rng.normal(0.0, spec.noise, th.shape)
        frames.append((name, pose, rgb, th))
    paths = write_scene(out_dir, intr, frames, spec.temp_range, train, test, spec.bounds)
    paths.append(save_checkpoint(out_dir / "truth_grid.npz", grid, background,
                                 synthetic_spec=spec.to_dict()))
    (out_dir / "synthetic_spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    paths.append(out_dir / "synthetic_spec.json")
    index, temps = truth_voxels(spec)
    if len(index):
        paths.append(write_vtk(voxel_mesh(index, temps, spec.bounds, spec.dims), out_dir / "truth_mesh.vtk"))
    return SyntheticResult(load_scene(out_dir), grid, paths)
