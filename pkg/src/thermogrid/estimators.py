"""scikit-learn style wrappers around the pipeline stages.

Each stage is an estimator with constructor-only hyper-parameters (so
``get_params``/``set_params``/``clone`` work) and fitted state in trailing
underscore attributes.
"""

from __future__ import annotations

from typing import Dict, List, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .fem import MaterialParams, SimulationResult, cells_to_nodes, simulate
from .mesh import VolumetricMesh, extract_mesh
from .metrics import MetricRow, evaluate_views
from .optimization import TrainConfig, train
from .renderer import RGB, THERMAL, render_image
from .validation import check_grid, check_mesh, check_percent, check_positive, check_scene
from .voxel_field import VoxelGrid


class ThermalFieldReconstructor(BaseEstimator):
    """Fit a density / color / temperature voxel grid to paired RGB and thermal views.

    Parameters
    ----------
    config : TrainConfig, optional
        Base training configuration; defaults to ``TrainConfig()``.
    dims, iterations, batch_size, lam, seed : optional
        Overrides applied on top of ``config`` when not ``None``.

    Attributes
    ----------
    grid_ : VoxelGrid
    background_ : ndarray of shape (H, W, 3)
    history_ : list of LossTerms
    config_ : TrainConfig
        The configuration actually used.
    """

    def __init__(self, config: Optional[TrainConfig] = None, dims=None, iterations=None,
                 batch_size=None, lam=None, seed=None):
        self.config = config
        self.dims = dims
        self.iterations = iterations
        self.batch_size = batch_size
        self.lam = lam
        self.seed = seed

    def resolved_config(self) -> TrainConfig:
        base = (self.config or TrainConfig()).to_dict()
        for name in ("dims", "iterations", "batch_size", "lam", "seed"):
            value = getattr(self, name)
            if value is not None:
                base[name] = value
        return TrainConfig.from_dict(base)

    def fit(self, X, y=None, callback=None):
        """``X`` is a :class:`~thermogrid.scene_io.Scene`; ``y`` is unused."""
        scene = check_scene(X)
        self.config_ = self.resolved_config()
        result = train(scene, self.config_, callback=callback)
        self.grid_ = result.grid
        self.background_ = result.background
        self.history_ = result.history
        self.intrinsics_ = scene.intrinsics
        return self

    def render(self, pose, channel: str = THERMAL, intrinsics=None) -> np.ndarray:
        check_is_fitted(self, "grid_")
        intr = intrinsics or self.intrinsics_
        return render_image(self.grid_, intr, pose, channel, background=self.background_).data

    def predict(self, X, channel: str = THERMAL) -> np.ndarray:
        """Render a sequence of poses; thermal output is normalized to ``[0, 1]``."""
        return np.stack([self.render(pose, channel) for pose in X])

    def evaluate(self, scene, split: str = "test", scene_name: str = "scene") -> List[MetricRow]:
        check_is_fitted(self, "grid_")
        renders: Dict[str, tuple] = {
            p.name: (self.render(p.pose, RGB, scene.intrinsics), self.render(p.pose, THERMAL, scene.intrinsics))
            for p in scene.split(split)
        }
        return evaluate_views(scene, renders, split, scene_name)

    def score(self, X, y=None) -> float:
        """Negative mean held-out thermal MAE in degrees C (higher is better)."""
        rows = self.evaluate(check_scene(X, require_test=True))
        return -next(r.mae for r in rows if r.view == "mean" and r.channel == THERMAL)


class VoxelMeshExtractor(TransformerMixin, BaseEstimator):
    """Grid -> volumetric mesh of the largest connected block of dense voxels.

    Parameters
    ----------
    t_percent : float
        Share of non-empty voxels kept, by descending center density.
    tets : bool
        Split hexahedra into tetrahedra.
    """

    def __init__(self, t_percent: float = 40.0, tets: bool = False):
        self.t_percent = t_percent
        self.tets = tets

    def fit(self, X=None, y=None):
        check_percent(self.t_percent)
        return self

    def transform(self, X: VoxelGrid) -> VolumetricMesh:
        grid = check_grid(X)
        return extract_mesh(grid, check_percent(self.t_percent), bool(self.tets))


class HeatConductionSimulator(BaseEstimator):
    """Implicit Euler heat conduction on a mesh with insulated boundaries.

    Parameters
    ----------
    conductivity, density, specific_heat : float
        Uniform material constants.
    steps : int
    dt : float, optional
        Time step; ``None`` picks ``h^2 rho c / (6 k)``.
    tol : float
        Relative conjugate-gradient residual per step.
    """

    def __init__(self, conductivity: float = 1.0, density: float = 1.0, specific_heat: float = 1.0,
                 steps: int = 10, dt: Optional[float] = None, tol: float = 1e-10):
        self.conductivity = conductivity
        self.density = density
        self.specific_heat = specific_heat
        self.steps = steps
        self.dt = dt
        self.tol = tol

    @property
    def material(self) -> MaterialParams:
        return MaterialParams(self.conductivity, self.density, self.specific_heat)

    def fit(self, X: VolumetricMesh, y=None, out_dir=None):
        """Simulate from the mesh's cell temperatures (``y`` may override nodal values)."""
        mesh = check_mesh(X)
        if self.dt is not None:
            check_positive("dt", self.dt)
        initial = cells_to_nodes(mesh) if y is None else np.asarray(y, dtype=float)
        self.result_: SimulationResult = simulate(mesh, self.material, int(self.steps), self.dt, initial,
                                                  out_dir=out_dir, tol=self.tol)
        return self

    def predict(self, X: VolumetricMesh) -> np.ndarray:
        """Final nodal temperatures after ``steps`` steps starting from ``X``."""
        return self.fit(X).result_.final.nodal_temperature
