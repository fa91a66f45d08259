"""Transient heat conduction on a volumetric mesh with implicit Euler.

Galerkin discretization with trilinear hexahedra (2x2x2 Gauss quadrature)
or linear tetrahedra, lumped capacity and zero-flux boundaries. Each step
solves ``(M + dt K) T_new = M T_old`` by Jacobi-preconditioned conjugate
gradients.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg

from .mesh import HEX_CORNERS, VolumetricMesh, write_vtk

SUMMARY_COLUMNS = ("step", "time", "min_C", "max_C", "mean_C", "energy")


class DegenerateCellError(ValueError):
    def __init__(self, cell: int, detail: str = "non-positive Jacobian"):
        super().__init__(f"degenerate cell {cell}: {detail}")
        self.cell = cell


class ConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"conjugate gradient did not converge in {iterations} iterations "
                         f"(relative residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class MaterialParams:
    """Uniform material: conductivity ``k``, mass density ``rho``, specific heat ``c``."""

    conductivity: float = 1.0
    density: float = 1.0
    specific_heat: float = 1.0

    def __post_init__(self):
        for name in ("conductivity", "density", "specific_heat"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive, got {v}")

    @property
    def capacity(self) -> float:
        return self.density * self.specific_heat


@dataclass
class HeatState:
    nodal_temperature: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.nodal_temperature = np.asarray(self.nodal_temperature, dtype=float)
        if not np.all(np.isfinite(self.nodal_temperature)):
            raise FloatingPointError("non-finite nodal temperature")


@dataclass
class HeatSystem:
    """Assembled operators: sparse stiffness ``K`` and lumped capacity diagonal ``M``."""

    K: sparse.csr_matrix
    M: np.ndarray

    @property
    def mass_matrix(self) -> sparse.dia_matrix:
        return sparse.diags(self.M)

    def energy(self, temperature) -> float:
        return float(self.M @ np.asarray(temperature, dtype=float))


def cells_to_nodes(mesh: VolumetricMesh) -> np.ndarray:
    """Volume-weighted mean of the temperatures of the cells touching each node."""
    vol = mesh.cell_volumes()
    npc = mesh.cells.shape[1]
    idx = mesh.cells.reshape(-1)
    w = np.repeat(vol, npc)
    num = np.bincount(idx, weights=w * np.repeat(mesh.cell_temperature, npc), minlength=mesh.n_nodes)
    den = np.bincount(idx, weights=w, minlength=mesh.n_nodes)
    if np.any(den <= 0):
        raise ValueError("mesh has nodes not used by any cell")
    return num / den


# reference hexahedron on [-1, 1]^3 in VTK node order
_XI = 2.0 * HEX_CORNERS - 1.0
_GAUSS = np.array(list(product((-1.0, 1.0), repeat=3))) / math.sqrt(3.0)


def _hex_shape(points):
    """Trilinear shape functions and reference derivatives at ``points`` (g, 3)."""
    p = points[:, None, :] * _XI[None, :, :]  # (g, 8, 3)
    f = 1.0 + p
    N = np.prod(f, axis=2) / 8.0
    dN = np.empty(points.shape[:1] + (8, 3))
    for d in range(3):
        others = [e for e in range(3) if e != d]
        dN[:, :, d] = _XI[None, :, d] * f[:, :, others[0]] * f[:, :, others[1]] / 8.0
    return N, dN


def hex_element_matrices(coords, conductivity: float = 1.0, capacity: float = 1.0):
    """Element stiffness ``(m, 8, 8)`` and lumped capacity ``(m, 8)`` for hexes.

    ``coords`` is ``(m, 8, 3)`` in VTK node order.
    """
    coords = np.asarray(coords, dtype=float)
    N, dN = _hex_shape(_GAUSS)
    J = np.einsum("gad,mai->mgdi", dN, coords)  # d x_i / d xi_d
    det = np.linalg.det(J)
    bad = np.flatnonzero(np.any(det <= 0, axis=1))
    if bad.size:
        raise DegenerateCellError(int(bad[0]))
    B = np.linalg.solve(J, np.broadcast_to(np.swapaxes(dN, 1, 2), J.shape[:2] + (3, 8)))
    Ke = conductivity * np.einsum("mg,mgia,mgib->mab", det, B, B)
    Me = capacity * np.einsum("mg,ga->ma", det, N)
    return Ke, Me


def tet_element_matrices(coords, conductivity: float = 1.0, capacity: float = 1.0):
    """Element stiffness ``(m, 4, 4)`` and lumped capacity ``(m, 4)`` for linear tets."""
    coords = np.asarray(coords, dtype=float)
    E = coords[:, 1:] - coords[:, :1]  # (m, 3, 3) edge rows
    vol = np.linalg.det(E) / 6.0
    bad = np.flatnonzero(vol <= 0)
    if bad.size:
        raise DegenerateCellError(int(bad[0]), "non-positive volume")
    # gradients of barycentric coordinates 1..3 are the rows of inv(E)^T
    G = np.swapaxes(np.linalg.inv(E), 1, 2)
    grads = np.concatenate([-G.sum(axis=1, keepdims=True), G], axis=1)
    Ke = conductivity * vol[:, None, None] * np.einsum("mai,mbi->mab", grads, grads)
    Me = capacity * np.repeat(vol[:, None] / 4.0, 4, axis=1)
    return Ke, Me


def assemble(mesh: VolumetricMesh, material: Optional[MaterialParams] = None) -> HeatSystem:
    """Global stiffness and lumped capacity for insulated boundaries."""
    material = material or MaterialParams()
    coords = mesh.nodes[mesh.cells]
    if mesh.cell_type == "hex":
        Ke, Me = hex_element_matrices(coords, material.conductivity, material.capacity)
    else:
        Ke, Me = tet_element_matrices(coords, material.conductivity, material.capacity)
    npc = mesh.cells.shape[1]
    rows = np.repeat(mesh.cells, npc, axis=1).reshape(-1)
    cols = np.tile(mesh.cells, (1, npc)).reshape(-1)
    K = sparse.coo_matrix((Ke.reshape(-1), (rows, cols)), shape=(mesh.n_nodes,) * 2).tocsr()
    K = (K + K.T) * 0.5  # remove rounding asymmetry
    M = np.bincount(mesh.cells.reshape(-1), weights=Me.reshape(-1), minlength=mesh.n_nodes)
    return HeatSystem(K.tocsr(), M)


def default_dt(mesh: VolumetricMesh, material: Optional[MaterialParams] = None) -> float:
    """``h^2 rho c / (6 k)`` with ``h`` the smallest voxel edge of the mesh."""
    material = material or MaterialParams()
    vol = mesh.cell_volumes()
    h = float(np.min(vol * (6.0 if mesh.cell_type == "tet" else 1.0))) ** (1.0 / 3.0)
    return h * h * material.capacity / (6.0 * material.conductivity)


def _solve(A, b, x0, M_diag_inv, tol, maxiter):
    x, info = cg(A, b, x0=x0, rtol=tol, atol=0.0, maxiter=maxiter,
                 M=sparse.diags(M_diag_inv))
    bnorm = np.linalg.norm(b)
    res = np.linalg.norm(b - A @ x) / (bnorm if bnorm > 0 else 1.0)
    if info != 0 or not np.isfinite(res) or res > max(tol, 1e-8):
        raise ConvergenceError(float(res), maxiter if info > 0 else 0)
    return x


def step(state: HeatState, K, M, dt: float, tol: float = 1e-10, maxiter: int = 10000) -> HeatState:
    """One implicit Euler step of ``M dT/dt = -K T``.

    Parameters
    ----------
    K : sparse matrix
        Stiffness.
    M : array
        Lumped capacity diagonal.
    tol : float
        Relative CG residual; a solve that misses ``max(tol, 1e-8)`` raises
        :class:`ConvergenceError`.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    M = np.asarray(M, dtype=float)
    A = (sparse.diags(M) + dt * K).tocsr()
    T = _solve(A, M * state.nodal_temperature, state.nodal_temperature, 1.0 / A.diagonal(), tol, maxiter)
    return HeatState(T, state.time + dt)


@dataclass
class SimulationResult:
    history: List[HeatState]
    energy: List[float] = field(default_factory=list)
    max_change: List[float] = field(default_factory=list)
    dt: float = 0.0
    paths: List[Path] = field(default_factory=list)

    @property
    def final(self) -> HeatState:
        return self.history[-1]


def simulate(mesh: VolumetricMesh, material: Optional[MaterialParams] = None, steps: int = 10,
             dt: Optional[float] = None, initial=None, out_dir=None, tol: float = 1e-10,
             maxiter: int = 10000) -> SimulationResult:
    """Run ``steps`` implicit Euler steps starting from the mesh's cell temperatures.

    ``initial`` overrides the nodal starting field (default
    :func:`cells_to_nodes`). With ``out_dir`` set, every state is written to
    ``step_XXXX.vtk`` (POINT_DATA ``temperature_C``) and the summary to
    ``summary.csv``. ``max_change[n]`` is ``max |T_{n+1} - T_n|``.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    material = material or MaterialParams()
    system = assemble(mesh, material)
    dt = default_dt(mesh, material) if dt is None else float(dt)
    if not dt > 0:
        raise ValueError("dt must be positive")
    T0 = cells_to_nodes(mesh) if initial is None else np.asarray(initial, dtype=float)
    state = HeatState(T0.copy(), 0.0)
    result = SimulationResult([state], [system.energy(T0)], [], dt)
    A = (sparse.diags(system.M) + dt * system.K).tocsr()
    inv_diag = 1.0 / A.diagonal()
    for _ in range(steps):
        T = _solve(A, system.M * state.nodal_temperature, state.nodal_temperature, inv_diag, tol, maxiter)
        result.max_change.append(float(np.max(np.abs(T - state.nodal_temperature))))
        state = HeatState(T, state.time + dt)
        result.history.append(state)
        result.energy.append(system.energy(T))
    if out_dir is not None:
        result.paths = write_simulation(result, mesh, system, out_dir)
    return result


def write_simulation(result: SimulationResult, mesh: VolumetricMesh, system: HeatSystem, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    total = float(system.M.sum())
    rows = []
    for n, (state, energy) in enumerate(zip(result.history, result.energy)):
        T = state.nodal_temperature
        written.append(write_vtk(mesh, out_dir / f"step_{n:04d}.vtk", {"temperature_C": T},
                                 title=f"heat step {n} t={state.time:.12g}"))
        rows.append([n, repr(state.time), repr(float(T.min())), repr(float(T.max())),
                     repr(energy / total), repr(energy)])
    summary = out_dir / "summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(rows)
    written.append(summary)
    return written
