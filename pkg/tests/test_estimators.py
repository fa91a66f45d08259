import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from thermogrid.estimators import HeatConductionSimulator, ThermalFieldReconstructor, VoxelMeshExtractor
from thermogrid.fem import cells_to_nodes
from thermogrid.optimization import TrainConfig
from thermogrid.scene_io import generate_synthetic, slab_spec


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    spec = slab_spec(dims=(16, 16, 16), n_train=4, n_test=2, width=16, height=16)
    return generate_synthetic(spec, tmp_path_factory.mktemp("est"))


def base_config():
    return TrainConfig(dims=(8, 8, 8), iterations=20, batch_size=200, background_shape=(4, 8), lr_density=1.0)


def test_params_and_clone():
    est = ThermalFieldReconstructor(base_config(), iterations=5, seed=2)
    params = est.get_params()
    assert params["iterations"] == 5 and params["seed"] == 2
    twin = clone(est)
    assert twin.get_params()["iterations"] == 5
    assert est.set_params(lam=0.2).resolved_config().lam == 0.2
    assert est.resolved_config().dims == (8, 8, 8)


def test_unfitted_render_raises(synthetic):
    with pytest.raises(NotFittedError):
        ThermalFieldReconstructor().render(synthetic.scene.pairs["000"].pose)


def test_fit_predict_score(synthetic):
    scene = synthetic.scene
    est = ThermalFieldReconstructor(base_config(), seed=1).fit(scene)
    assert len(est.history_) == 20 and est.config_.seed == 1
    poses = [scene.pairs[n].pose for n in scene.test]
    out = est.predict(poses)
    assert out.shape == (2, 16, 16) and np.all((out >= 0) & (out <= 1))
    rows = est.evaluate(scene)
    assert -est.score(scene) == next(r.mae for r in rows if r.view == "mean" and r.channel == "thermal")


def test_fit_rejects_non_scene():
    with pytest.raises(TypeError):
        ThermalFieldReconstructor().fit(np.zeros(3))


def test_mesh_extractor_on_truth_grid(synthetic):
    mesh = VoxelMeshExtractor(t_percent=100).fit_transform(synthetic.grid)
    assert mesh.n_cells == 8 * 8 * 2
    tets = VoxelMeshExtractor(t_percent=100, tets=True).fit_transform(synthetic.grid)
    assert tets.n_cells == 6 * mesh.n_cells
    with pytest.raises(ValueError):
        VoxelMeshExtractor(t_percent=0).fit()


def test_simulator(synthetic):
    mesh = VoxelMeshExtractor(t_percent=100).fit_transform(synthetic.grid)
    sim = HeatConductionSimulator(steps=3)
    final = sim.predict(mesh)
    assert np.allclose(final, 40.0)
    assert len(sim.result_.history) == 4
    y = cells_to_nodes(mesh)
    y[0] = 20.0
    sim.fit(mesh, y)
    assert sim.result_.final.nodal_temperature.min() > 20.0
    with pytest.raises(ValueError):
        HeatConductionSimulator(dt=-1.0).fit(mesh)
