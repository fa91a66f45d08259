"""Acceptance criteria 1-7; each records a pass/fail line shown in the terminal summary.

Criterion 8 (dataset-scale comparison) needs external data and is skipped.
"""

import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from thermogrid.camera import Ray
from thermogrid.cli import main
from thermogrid.estimators import ThermalFieldReconstructor
from thermogrid.fem import simulate
from thermogrid.mesh import (CellSamples, densest_count, extract_mesh, filter_densest, hex_to_tet, largest_connected_component,
                             sample_cell_centers, voxel_mesh)
from thermogrid.metrics import mae, psnr, ssim
from thermogrid.optimization import TrainConfig
from thermogrid.renderer import (RayBatch, compositing_weights, composite_temperature, render_rays,
                                 sample_ray)
from thermogrid.scene_io import generate_synthetic, slab_spec, truth_voxels
from thermogrid.voxel_field import GridBounds, sample_trilinear

import conftest
from conftest import random_grid
from gradcheck import check_loss_gradient
from reference_metrics import random_pair, ref_mae, ref_psnr, ref_ssim

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "slab_acceptance.json"


def record(n, ok, detail):
    conftest.ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


def test_criterion_1_adjoint_correctness():
    t = time.perf_counter()
    worst = max(check_loss_gradient(seed, per_field=10) for seed in range(20))
    dt = time.perf_counter() - t
    record(1, worst < 1e-3 and dt < 60, f"max rel err {worst:.2e} over 20 seeds, {dt:.1f} s")


def test_criterion_2_compositing_conservation():
    rng = np.random.default_rng(2)
    grid = random_grid(rng, dims=(6, 6, 6), density_scale=20.0)
    n = 10_000
    o = rng.normal(size=(n, 3))
    o = 3.0 * o / np.linalg.norm(o, axis=1, keepdims=True)
    d = rng.uniform(-0.9, 0.9, (n, 3)) - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    step = 0.05
    worst_sum = worst_hull = 0.0
    for k in range(n):
        s = sample_ray(grid, Ray(o[k], d[k]), step)
        if s.count == 0:
            continue
        sig = sample_trilinear(grid, s.positions, "density")
        temps = sample_trilinear(grid, s.positions, "temperature")
        w, res = compositing_weights(sig, s.deltas)
        worst_sum = max(worst_sum, abs(w.sum() + res - 1.0))
        t = composite_temperature(sig, s.deltas, temps)
        lo, hi = min(temps.min(), 0.0), max(temps.max(), 0.0)
        worst_hull = max(worst_hull, lo - t, t - hi)
    # the batched kernel: with temperature 1 everywhere the thermal composite is 1 - residual
    grid.temperature[:] = 1.0
    cache = render_rays(grid, RayBatch.from_rays(o, d, grid.bounds), step)
    worst_kernel = float(np.max(np.abs(cache.thermal + cache.transmittance - 1.0)))
    ok = worst_sum < 1e-9 and worst_kernel < 1e-9 and worst_hull <= 1e-12
    record(2, ok, f"max |sum w + T - 1| {max(worst_sum, worst_kernel):.1e}, hull violation {worst_hull:.1e}")


@pytest.fixture(scope="module")
def slab_run(tmp_path_factory):
    spec = slab_spec()
    synth = generate_synthetic(spec, tmp_path_factory.mktemp("slab"))
    config = TrainConfig.from_file(CONFIG)
    t = time.perf_counter()
    est = ThermalFieldReconstructor(config).fit(synth.scene)
    rows = est.evaluate(synth.scene)
    return spec, synth, est, rows, time.perf_counter() - t


def test_criterion_3_synthetic_reconstruction(slab_run):
    spec, synth, est, rows, seconds = slab_run
    scene = synth.scene
    assert len(scene.train) == 20 and len(scene.test) == 5 and est.config_.dims == (64, 64, 64)
    th_mae = next(r.mae for r in rows if r.view == "mean" and r.channel == "thermal")
    rgb_psnr = next(r.psnr for r in rows if r.view == "mean" and r.channel == "rgb")
    mesh = extract_mesh(est.grid_, 40.0)
    truth = set(map(tuple, truth_voxels(spec)[0].tolist()))
    cells = set(map(tuple, mesh.cell_origin.tolist()))
    recall = len(truth & cells) / len(truth)
    spurious = len(cells - truth) / len(cells)
    ok = (th_mae < 0.5 and rgb_psnr > 25 and recall >= 0.9 and spurious <= 0.1
          and est.config_.iterations <= 5000 and seconds < 900)
    record(3, ok, f"thermal MAE {th_mae:.3f} C, RGB PSNR {rgb_psnr:.2f} dB, recall {recall:.3f}, "
                  f"spurious {spurious:.3f}, {seconds:.0f} s")


def shared_quads_split_consistently(hexes, tets):
    quads = [(0, 1, 2, 3), (4, 5, 6, 7), (0, 1, 5, 4), (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7)]
    faces = Counter(frozenset(c[list(q)].tolist()) for c in hexes.cells for q in quads)
    tris = Counter(frozenset(np.delete(t, k).tolist()) for t in tets.cells for k in range(4))
    if max(tris.values()) > 2:
        return False
    by_face = {}
    for tri, count in tris.items():
        for f in (f for f, c in faces.items() if c == 2 and tri <= f):
            by_face.setdefault(f, []).append(count)
    shared = [f for f, c in faces.items() if c == 2]
    return all(sorted(by_face.get(f, [])) == [2, 2] for f in shared)


def test_criterion_4_mesh_contract(slab_run):
    failures = []
    samples = sample_cell_centers(slab_run[2].grid_)
    n_nonempty = int(np.sum(samples.density > 0))
    for t in (10.0, 33.3, 40.0, 100.0):
        if len(filter_densest(samples, t)) != densest_count(t, n_nonempty):
            failures.append(f"cardinality at t={t}")
    mesh = extract_mesh(slab_run[2].grid_, 40.0)
    if len(largest_connected_component(sample_cells(mesh))) != mesh.n_cells:
        failures.append("mesh is not one 6-connected component")
    bounds = GridBounds((0.0, 0.0, 0.0), (4.0, 4.0, 4.0))
    for n in (1, 2, 3):
        m = voxel_mesh([[i, j, k] for i in range(n) for j in range(n) for k in range(n)], 20.0, bounds, (4, 4, 4))
        if (m.n_nodes, m.n_cells) != ((n + 1) ** 3, n ** 3):
            failures.append(f"counts for {n}^3 block")
    rng = np.random.default_rng(4)
    worst_vol = 0.0
    for _ in range(5):
        idx = np.argwhere(rng.uniform(size=(4, 4, 4)) < 0.5)
        hexes = voxel_mesh(idx, 20.0, bounds, (4, 4, 4))
        tets = hex_to_tet(hexes)
        worst_vol = max(worst_vol, abs(tets.cell_volumes().sum() - hexes.cell_volumes().sum()))
        if not shared_quads_split_consistently(hexes, tets):
            failures.append("inconsistent shared-face diagonals")
    if worst_vol > 1e-12:
        failures.append(f"tet volume error {worst_vol:.1e}")
    record(4, not failures, "; ".join(failures) or f"all checks hold, volume error {worst_vol:.1e}")


def sample_cells(mesh):
    return CellSamples(mesh.cell_origin, np.ones(mesh.n_cells), mesh.cell_temperature)


def test_criterion_5_fea_convergence(slab_run):
    spec, synth, est, _, _ = slab_run
    meshes = {
        "truth": voxel_mesh(*truth_voxels(spec), spec.bounds, spec.dims),
        "hex": extract_mesh(est.grid_, 40.0),
        "tet": extract_mesh(est.grid_, 40.0, tets=True),
    }
    details, ok = [], True
    for name, mesh in meshes.items():
        res = simulate(mesh, steps=10)
        finite = all(np.all(np.isfinite(s.nodal_temperature)) for s in res.history)
        e = np.array(res.energy)
        drift = float(np.max(np.abs(e - e[0])) / abs(e[0]))
        vol = mesh.cell_volumes()
        target = float(np.sum(vol * mesh.cell_temperature) / vol.sum())
        long = simulate(mesh, steps=60, dt=0.05, initial=res.final.nodal_temperature)
        gap = float(np.max(np.abs(long.final.nodal_temperature - target)))
        ok &= finite and drift < 1e-8 and gap < 0.1
        details.append(f"{name}: drift {drift:.1e}, gap {gap:.3f} C")
    record(5, ok, "; ".join(details))


def test_criterion_6_metric_fidelity():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        a, b = random_pair(rng, (16, 16, 3))
        worst = max(worst, abs(psnr(a, b) - ref_psnr(a, b)), abs(ssim(a, b) - ref_ssim(a, b)),
                    abs(mae(a, b, (20.0, 40.0)) - ref_mae(a, b, 20.0)))
    record(6, worst < 1e-6, f"max abs difference {worst:.1e} over 100 pairs")


def test_criterion_7_determinism(tmp_path):
    gen = ["--dims", "16", "16", "16", "--n-train", "4", "--n-test", "1", "--width", "24", "--height", "24"]
    train = ["--iterations", "30", "--dims", "16", "16", "16", "--batch-size", "500", "--lr-density", "1",
             "--background-shape", "4", "8", "--log-every", "0", "--seed", "7"]
    for run in ("a", "b"):
        root = tmp_path / run
        assert main(["gen-synthetic", "--out", str(root / "scene"), *gen]) == 0
        assert main(["train", "--scene", str(root / "scene"), "--out", str(root / "train"), *train]) == 0
        assert main(["extract-mesh", "--checkpoint", str(root / "train" / "checkpoint.npz"),
                     "--out", str(root / "mesh.vtk")]) == 0
        assert main(["simulate", "--mesh", str(root / "mesh.vtk"), "--out", str(root / "sim")]) == 0
    same = {rel: (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
            for rel in ("train/loss.csv", "mesh.vtk", "sim/summary.csv")}
    record(7, all(same.values()), ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))


@pytest.mark.skip(reason="dataset-scale comparison needs the external thermal scene collection")
def test_criterion_8_dataset_scale():
    pass
