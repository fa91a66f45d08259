import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from thermogrid.voxel_field import (GridBounds, OutOfBoundsError, VoxelGrid, corner_index,
                                    load_checkpoint, sample_trilinear, save_checkpoint,
                                    scatter_gradient, trilinear_stencil)

from conftest import random_grid


def unit_grid(dims=(1, 1, 1)):
    return VoxelGrid.full(dims, GridBounds((0.0, 0.0, 0.0), tuple(float(d) for d in dims)))


def test_bounds_must_be_ordered():
    with pytest.raises(ValueError):
        GridBounds((0, 0, 0), (1, 0, 1))


def test_field_sizes_follow_corner_count():
    g = VoxelGrid.full((3, 4, 5), GridBounds((0, 0, 0), (1, 1, 1)))
    n = 4 * 5 * 6
    assert g.density.shape == (n,) and g.temperature.shape == (n,) and g.sh.shape == (n, 27)
    assert g.volume("sh").shape == (6, 5, 4, 27)


def test_corner_index_is_x_fastest():
    assert corner_index((3, 4, 5), 1, 0, 0) == 1
    assert corner_index((3, 4, 5), 0, 1, 0) == 4
    assert corner_index((3, 4, 5), 0, 0, 1) == 20


def test_corner_points_return_corner_values(rng):
    g = random_grid(rng, dims=(2, 2, 2))
    for i, j, k in [(0, 0, 0), (2, 1, 0), (1, 2, 2), (2, 2, 2)]:
        p = g.bounds.lo + np.array([i, j, k]) * g.voxel_size
        assert sample_trilinear(g, p) == pytest.approx(g.density[corner_index(g.dims, i, j, k)], abs=1e-14)


def test_voxel_center_is_corner_mean(rng):
    g = unit_grid()
    g.density[:] = rng.uniform(size=8)
    assert sample_trilinear(g, [0.5, 0.5, 0.5]) == pytest.approx(g.density.mean(), abs=1e-14)


@given(st.lists(st.floats(0.0, 3.0), min_size=3, max_size=3),
       st.lists(st.floats(-2.0, 2.0), min_size=4, max_size=4))
def test_linear_fields_are_reproduced(p, coef):
    g = unit_grid((3, 3, 3))
    ii, jj, kk = np.meshgrid(np.arange(4), np.arange(4), np.arange(4), indexing="ij")
    pts = np.stack([ii, jj, kk], -1).reshape(-1, 3).astype(float)
    flat = [corner_index(g.dims, *map(int, q)) for q in pts]
    g.density[flat] = coef[0] + pts @ np.array(coef[1:])
    expected = coef[0] + np.dot(p, coef[1:])
    assert sample_trilinear(g, p) == pytest.approx(expected, abs=1e-9)


@given(st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3))
def test_stencil_weights_form_partition_of_unity(p):
    g = VoxelGrid.full((3, 5, 2), GridBounds((-1, -1, -1), (1, 1, 1)))
    idx, w = trilinear_stencil(g, p)
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0, abs=1e-12)
    assert idx.min() >= 0 and idx.max() < g.n_corners


def test_out_of_bounds_raises():
    with pytest.raises(OutOfBoundsError):
        sample_trilinear(unit_grid(), [1.1, 0.5, 0.5])


def test_scatter_is_adjoint_of_sampling(rng):
    g = random_grid(rng, dims=(3, 3, 3))
    pts = rng.uniform(-1, 1, (5, 3))
    up = rng.normal(size=5)
    for field in ("density", "temperature", "sh"):
        buf = np.zeros_like(g.field(field))
        if field == "sh":
            up_f = rng.normal(size=(5, 27))
            scatter_gradient(g, pts, field, up_f, buf)

            def f():
                return np.sum(up_f * sample_trilinear(g, pts, field))
        else:
            up_f = up
            scatter_gradient(g, pts, field, up_f, buf)

            def f():
                return np.sum(up_f * sample_trilinear(g, pts, field))
        values = g.field(field).reshape(-1)
        h = 1e-4
        for n in rng.choice(values.size, 25, replace=False):
            old = values[n]
            values[n] = old + h
            fp = f()
            values[n] = old - h
            fm = f()
            values[n] = old
            fd = (fp - fm) / (2 * h)
            an = buf.reshape(-1)[n]
            assert abs(an - fd) <= 1e-6 * max(1.0, abs(fd))


def test_scatter_accumulates_repeated_corners():
    g = unit_grid()
    buf = np.zeros(8)
    scatter_gradient(g, np.full((3, 3), 0.5), "density", np.ones(3), buf)
    assert np.allclose(buf, 3 / 8)


def test_checkpoint_round_trip(tmp_path, rng):
    g = random_grid(rng, dims=(2, 3, 4))
    bg = rng.uniform(size=(4, 8, 3))
    save_checkpoint(tmp_path / "c.npz", g, bg, note="x")
    g2, bg2, meta = load_checkpoint(tmp_path / "c.npz")
    assert g2.dims == g.dims and g2.temp_range == g.temp_range
    assert np.array_equal(g2.density, g.density) and np.array_equal(g2.sh, g.sh)
    assert np.array_equal(g2.temperature, g.temperature) and np.array_equal(bg2, bg)
    assert meta == {"note": "x"}


def test_checkpoint_rejects_unknown_version(tmp_path):
    np.savez(tmp_path / "bad.npz", version=np.int64(99))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "bad.npz")


def test_denormalize_maps_unit_interval_to_range():
    g = VoxelGrid.full((1, 1, 1), GridBounds((0, 0, 0), (1, 1, 1)), temp_range=(20.0, 40.0))
    assert np.allclose(g.denormalize(np.array([0.0, 0.5, 1.0])), [20.0, 30.0, 40.0])
