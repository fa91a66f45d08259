"""Voxel grid -> single connected hexahedral (or tetrahedral) volumetric mesh.

Pipeline: cell-center sampling, t% densest-voxel filter over non-empty
voxels, largest 6-connected component, shared-node hex mesh, optional
6-tet split. Voxel indices are ``(i, j, k)`` and "lexicographic" order means
``i`` most significant.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, Optional

import numpy as np
from scipy import ndimage

from .voxel_field import GridBounds, VoxelGrid

VTK_TETRA = 10
VTK_HEXAHEDRON = 12

# VTK hexahedron winding: bottom face counter-clockwise seen from +z, then top
HEX_CORNERS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
])

# Kuhn split along the 0-6 diagonal, one tet per axis ordering, positively
# oriented. Every cube face gets the diagonal through its lowest or highest
# corner, so translated neighbours triangulate shared faces identically.
KUHN_TETS = np.array([
    [0, 1, 2, 6],
    [0, 1, 6, 5],
    [0, 3, 6, 2],
    [0, 3, 7, 6],
    [0, 4, 5, 6],
    [0, 4, 6, 7],
])


class EmptyReconstructionError(ValueError):
    """No voxel survives the non-empty / density filter."""


@dataclass(frozen=True)
class CellSample:
    index: tuple
    density: float
    temperature: float


@dataclass
class CellSamples:
    """Struct-of-arrays collection of voxel center samples.

    ``index`` is ``(n, 3)`` integer ``(i, j, k)``; ``temperature`` is in
    degrees C.
    """

    index: np.ndarray
    density: np.ndarray
    temperature: np.ndarray

    def __len__(self):
        return int(self.index.shape[0])

    def __getitem__(self, n) -> CellSample:
        return CellSample(tuple(int(v) for v in self.index[n]), float(self.density[n]),
                          float(self.temperature[n]))

    def take(self, sel) -> "CellSamples":
        return CellSamples(self.index[sel], self.density[sel], self.temperature[sel])

    def sorted(self) -> "CellSamples":
        order = np.lexsort((self.index[:, 2], self.index[:, 1], self.index[:, 0]))
        return self.take(order)


@dataclass
class VolumetricMesh:
    """Unstructured mesh with per-cell temperature (degrees C).

    ``cells`` is ``(m, 8)`` in VTK hexahedron order or ``(m, 4)`` tetrahedra.
    ``cell_origin`` holds the source voxel index of every cell.
    """

    nodes: np.ndarray
    cells: np.ndarray
    cell_temperature: np.ndarray
    cell_origin: np.ndarray
    cell_type: str = "hex"

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def n_cells(self) -> int:
        return int(self.cells.shape[0])

    def cell_volumes(self) -> np.ndarray:
        if self.cell_type == "tet":
            p = self.nodes[self.cells]
            return np.linalg.det(p[:, 1:] - p[:, :1]) / 6.0
        # exact for parallelepipeds; each hex -> its Kuhn tets
        p = self.nodes[self.cells]
        vol = np.zeros(self.n_cells)
        for tet in KUHN_TETS:
            q = p[:, tet]
            vol += np.linalg.det(q[:, 1:] - q[:, :1]) / 6.0
        return vol


def sample_cell_centers(grid: VoxelGrid) -> CellSamples:
    """Center density and denormalized temperature of every voxel.

    Trilinear interpolation at a cell center is the mean of its 8 corners.
    Output is in lexicographic ``(i, j, k)`` order.
    """
    def center_mean(vol):
        return (vol[:-1, :-1, :-1] + vol[:-1, :-1, 1:] + vol[:-1, 1:, :-1] + vol[:-1, 1:, 1:]
                + vol[1:, :-1, :-1] + vol[1:, :-1, 1:] + vol[1:, 1:, :-1] + vol[1:, 1:, 1:]) / 8.0

    # [k, j, i] -> [i, j, k] so a C-order ravel is lexicographic in (i, j, k)
    dens = center_mean(grid.volume("density")).transpose(2, 1, 0).reshape(-1)
    temp = center_mean(grid.volume("temperature")).transpose(2, 1, 0).reshape(-1)
    nx, ny, nz = grid.dims
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    index = np.stack([ii.reshape(-1), jj.reshape(-1), kk.reshape(-1)], axis=1)
    return CellSamples(index, dens.copy(), grid.denormalize(temp))


def densest_count(t_percent: float, n: int) -> int:
    """``ceil(t / 100 * n)`` evaluated exactly."""
    frac = Fraction(t_percent).limit_denominator(10**9) * n / 100
    return int(-(-frac.numerator // frac.denominator))


def filter_densest(samples: CellSamples, t_percent: float = 40.0) -> CellSamples:
    """Keep the ``ceil(t/100 * |V|)`` densest of the non-empty (density > 0) voxels.

    Ties in density are broken by lexicographic voxel index. The result is
    returned in lexicographic order.
    """
    if not (0.0 < t_percent <= 100.0):
        raise ValueError(f"t_percent must be in (0, 100], got {t_percent}")
    nonempty = samples.take(samples.density > 0.0)
    if len(nonempty) == 0:
        raise EmptyReconstructionError("empty reconstruction: no voxel has positive density")
    k = densest_count(t_percent, len(nonempty))
    idx = nonempty.index
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0], -nonempty.density))
    return nonempty.take(order[:k]).sorted()


def largest_connected_component(samples: CellSamples) -> CellSamples:
    """Largest 6-connected (face-adjacent) component.

    Ties go to the component containing the lexicographically smallest voxel.
    """
    if len(samples) == 0:
        raise EmptyReconstructionError("empty reconstruction: nothing to label")
    samples = samples.sorted()
    lo = samples.index.min(axis=0)
    local = samples.index - lo
    occ = np.zeros(local.max(axis=0) + 1, dtype=bool)
    occ[local[:, 0], local[:, 1], local[:, 2]] = True
    labels, n_labels = ndimage.label(occ, structure=ndimage.generate_binary_structure(3, 1))
    lab = labels[local[:, 0], local[:, 1], local[:, 2]]
    sizes = np.bincount(lab, minlength=n_labels + 1)
    # samples are sorted, so the first occurrence of each label is its minimum voxel
    _, first = np.unique(lab, return_index=True)
    labels_present = lab[np.sort(first)]
    best = max(labels_present, key=lambda L: sizes[L])  # max keeps the first among equals
    return samples.take(lab == best)


def build_mesh(component: CellSamples, bounds: GridBounds, dims) -> VolumetricMesh:
    """One hexahedron per voxel with shared, deduplicated corner nodes."""
    if len(component) == 0:
        raise EmptyReconstructionError("cannot mesh an empty component")
    component = component.sorted()
    nx, ny, _ = (int(d) for d in dims)
    corners = component.index[:, None, :] + HEX_CORNERS[None]  # (m, 8, 3)
    keys = corners[..., 0] + (nx + 1) * (corners[..., 1] + (ny + 1) * corners[..., 2])
    unique_keys, inverse = np.unique(keys.reshape(-1), return_inverse=True)
    cells = inverse.reshape(-1, 8).astype(np.int64)
    ijk = np.stack([unique_keys % (nx + 1),
                    (unique_keys // (nx + 1)) % (ny + 1),
                    unique_keys // ((nx + 1) * (ny + 1))], axis=1)
    size = (bounds.hi - bounds.lo) / np.asarray(dims, dtype=float)
    nodes = bounds.lo + ijk * size
    return VolumetricMesh(nodes, cells, component.temperature.astype(float).copy(),
                          component.index.copy(), "hex")


def hex_to_tet(mesh: VolumetricMesh) -> VolumetricMesh:
    """Split every hexahedron into 6 tetrahedra; each tet inherits its hex's data."""
    if mesh.cell_type != "hex":
        raise ValueError("hex_to_tet expects a hexahedral mesh")
    tets = mesh.cells[:, KUHN_TETS].reshape(-1, 4)
    return VolumetricMesh(mesh.nodes.copy(), tets, np.repeat(mesh.cell_temperature, 6),
                          np.repeat(mesh.cell_origin, 6, axis=0), "tet")


def extract_mesh(grid: VoxelGrid, t_percent: float = 40.0, tets: bool = False) -> VolumetricMesh:
    samples = sample_cell_centers(grid)
    component = largest_connected_component(filter_densest(samples, t_percent))
    mesh = build_mesh(component, grid.bounds, grid.dims)
    return hex_to_tet(mesh) if tets else mesh


def voxel_mesh(index, temperature, bounds: GridBounds, dims) -> VolumetricMesh:
    """Mesh an explicit voxel set (no filtering or component selection)."""
    index = np.asarray(index, dtype=np.int64).reshape(-1, 3)
    temperature = np.broadcast_to(np.asarray(temperature, dtype=float), (index.shape[0],))
    samples = CellSamples(index, np.ones(index.shape[0]), temperature.copy())
    return build_mesh(samples, bounds, dims)


# -- legacy VTK ---------------------------------------------------------------

def _fmt(x) -> str:
    return format(float(x), ".12g")


def write_vtk(mesh: VolumetricMesh, path, point_data: Optional[Dict[str, np.ndarray]] = None,
              title: str = "thermogrid volumetric mesh") -> Path:
    """Write a legacy ASCII VTK unstructured grid.

    Cell data always carries ``temperature_C``; ``point_data`` adds nodal
    scalar fields (e.g. FEM temperatures).
    """
    vtk_type = VTK_HEXAHEDRON if mesh.cell_type == "hex" else VTK_TETRA
    npc = mesh.cells.shape[1]
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_nodes} double"]
    lines += [" ".join(_fmt(v) for v in p) for p in mesh.nodes]
    lines.append(f"CELLS {mesh.n_cells} {mesh.n_cells * (npc + 1)}")
    lines += [f"{npc} " + " ".join(str(int(v)) for v in c) for c in mesh.cells]
    lines.append(f"CELL_TYPES {mesh.n_cells}")
    lines += [str(vtk_type)] * mesh.n_cells
    lines += [f"CELL_DATA {mesh.n_cells}", "SCALARS temperature_C double 1", "LOOKUP_TABLE default"]
    lines += [_fmt(v) for v in mesh.cell_temperature]
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_nodes}")
        for name, values in point_data.items():
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [_fmt(v) for v in np.asarray(values).reshape(-1)]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


class VTKFormatError(ValueError):
    pass


def read_vtk(path) -> VolumetricMesh:
    """Read meshes written by :func:`write_vtk` (cell origin is not stored; set to -1)."""
    tokens = Path(path).read_text().split("\n")
    try:
        if not tokens[0].startswith("# vtk") or tokens[3].strip() != "DATASET UNSTRUCTURED_GRID":
            raise VTKFormatError(f"{path}: not a legacy unstructured grid")
        rest = " ".join(tokens[4:]).split()
        pos = 0

        def take(n, expect=None):
            nonlocal pos
            out = rest[pos:pos + n]
            if len(out) != n or (expect is not None and out[0] != expect):
                raise VTKFormatError(f"{path}: expected {expect or n} at token {pos}")
            pos += n
            return out

        n_pts = int(take(3, "POINTS")[1])
        nodes = np.array(take(3 * n_pts), dtype=float).reshape(n_pts, 3)
        _, n_cells, n_ints = take(3, "CELLS")
        n_cells = int(n_cells)
        cells = np.array(take(int(n_ints)), dtype=np.int64).reshape(n_cells, -1)[:, 1:]
        types = np.array(take(int(take(2, "CELL_TYPES")[1])), dtype=int)
        section = None
        data = {"CELL_DATA": {}, "POINT_DATA": {}}
        while pos < len(rest):
            word = take(1)[0]
            if word in data:
                section = word
                take(1)
            elif word == "SCALARS" and section is not None:
                name = take(3)[0]
                take(2)
                count = n_cells if section == "CELL_DATA" else n_pts
                data[section][name] = np.array(take(count), dtype=float)
            else:
                raise VTKFormatError(f"{path}: unexpected token {word!r}")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, VTKFormatError):
            raise
        raise VTKFormatError(f"{path}: malformed VTK file ({exc})") from exc
    temps = data["CELL_DATA"].get("temperature_C")
    if temps is None:
        raise VTKFormatError(f"{path}: missing temperature_C cell data")
    cell_type = "hex" if np.all(types == VTK_HEXAHEDRON) else "tet"
    return VolumetricMesh(nodes, cells, temps, np.full((n_cells, 3), -1, dtype=np.int64), cell_type)
