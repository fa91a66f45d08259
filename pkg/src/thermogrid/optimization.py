"""Joint RGB + thermal loss and the RMSProp training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
from numba import njit

from .camera import generate_rays
from .losses import (rgb_l2_grad, rgb_l2_loss, thermal_data_grad, thermal_data_terms,
                     tv_loss_and_grad)
from .renderer import RayBatch, backward_render, render_rays
from .voxel_field import GradientBuffers, VoxelGrid

log = logging.getLogger(__name__)

LOSS_TERMS = ("rgb_l2", "tv_rgb", "thermal_l2", "thermal_l1", "tv_thermal", "total")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration: int, term: str, value: float):
        super().__init__(f"non-finite loss at iteration {iteration}: {term} = {value}")
        self.iteration = iteration
        self.term = term


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.5
    tv_rgb: float = 1e-4
    tv_thermal: float = 1e-4

    def __post_init__(self):
        for name in ("lam", "tv_rgb", "tv_thermal"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.lam > 1:
            raise ValueError("lam must lie in [0, 1]")


@dataclass
class TrainConfig:
    """Training hyper-parameters; flat so it round-trips through a JSON file.

    Learning rates, smoothing and initial values follow common voxel
    radiance-field practice and are not tuned per scene. Every learning
    rate decays log-linearly to ``lr_final_ratio`` times its start value over
    the run (1.0 keeps it constant).
    """

    dims: Tuple[int, int, int] = (128, 128, 128)
    iterations: int = 2000
    batch_size: int = 5000
    lr_density: float = 30.0
    lr_sh: float = 1e-2
    lr_temperature: float = 1e-2
    lr_background: float = 1e-2
    rms_decay: float = 0.95
    rms_eps: float = 1e-8
    lr_final_ratio: float = 1.0
    density_min: float = 0.0
    lam: float = 0.5
    tv_rgb: float = 1e-4
    tv_thermal: float = 1e-4
    init_density: float = 0.1
    init_sh0: float = 0.01
    init_temperature: float = 0.5
    init_background: float = 0.5
    background_shape: Tuple[int, int] = (64, 128)
    step_ratio: float = 0.5
    thermal_density_grad: bool = True
    skip_empty: bool = True
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.background_shape = tuple(int(d) for d in self.background_shape)
        if self.iterations < 0 or self.batch_size <= 0:
            raise ValueError("iterations must be >= 0 and batch_size > 0")
        if not 0.0 < self.rms_decay < 1.0:
            raise ValueError("rms_decay must lie in (0, 1)")
        if not 0.0 < self.lr_final_ratio <= 1.0:
            raise ValueError("lr_final_ratio must lie in (0, 1]")
        LossWeights(self.lam, self.tv_rgb, self.tv_thermal)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lam, self.tv_rgb, self.tv_thermal)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["background_shape"] = list(self.background_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def initial_grid(config: TrainConfig, bounds, temp_range) -> VoxelGrid:
    return VoxelGrid.full(config.dims, bounds, density=config.init_density, sh0=config.init_sh0,
                          temperature=config.init_temperature, temp_range=temp_range)


def initial_background(config: TrainConfig) -> np.ndarray:
    return np.full(tuple(config.background_shape) + (3,), config.init_background)


@dataclass
class LossTerms:
    rgb_l2: float
    tv_rgb: float
    thermal_l2: float
    thermal_l1: float
    tv_thermal: float
    total: float

    def as_row(self) -> List[float]:
        return [getattr(self, t) for t in LOSS_TERMS]


def total_loss(grid: VoxelGrid, background: np.ndarray, rays: RayBatch, rgb_truth, thermal_truth,
               weights: LossWeights, step: float, buffers: Optional[GradientBuffers] = None,
               thermal_density_grad: bool = True, skip_empty: bool = True):
    """Loss over a ray batch; when ``buffers`` is given their gradients are accumulated.

    ``L = L2_rgb + tv_rgb * TV(SH) + lam * L2_T + (1 - lam) * L1_T + tv_thermal * TV(T)``
    """
    cache = render_rays(grid, rays, step, background, skip_empty)
    rgb = cache.rgb
    rgb_l2 = rgb_l2_loss(rgb, rgb_truth)
    th_l2, th_l1 = thermal_data_terms(cache.thermal, thermal_truth)
    corner_shape = grid.corner_shape
    if buffers is not None:
        g_rgb = rgb_l2_grad(rgb, rgb_truth)
        g_th = thermal_data_grad(cache.thermal, thermal_truth, weights.lam)
        backward_render(grid, rays, cache, g_rgb, g_th, step, background.shape[:2], buffers,
                        thermal_density_grad, skip_empty)
        tv_sh = tv_loss_and_grad(grid.sh, corner_shape, weights.tv_rgb, buffers.sh)
        tv_t = tv_loss_and_grad(grid.temperature, corner_shape, weights.tv_thermal, buffers.temperature)
    else:
        tv_sh = tv_loss_and_grad(grid.sh, corner_shape, 0.0, np.empty_like(grid.sh))
        tv_t = tv_loss_and_grad(grid.temperature, corner_shape, 0.0, np.empty_like(grid.temperature))
    total = (rgb_l2 + weights.tv_rgb * tv_sh + weights.lam * th_l2
             + (1.0 - weights.lam) * th_l1 + weights.tv_thermal * tv_t)
    return LossTerms(rgb_l2, tv_sh, th_l2, th_l1, tv_t, total)


@njit(cache=True)
def _rmsprop_step(param, grad, sq, lr, decay, eps):
    p = param.reshape(-1)
    g = grad.reshape(-1)
    s = sq.reshape(-1)
    for n in range(p.size):
        gn = g[n]
        s[n] = decay * s[n] + (1.0 - decay) * gn * gn
        if gn != 0.0:
            p[n] -= lr * gn / (math.sqrt(s[n]) + eps)


class RMSProp:
    """Per-field RMSProp with one learning rate per parameter group."""

    def __init__(self, params: dict, lrs: dict, decay: float = 0.95, eps: float = 1e-8):
        self.params = params
        self.lrs = lrs
        self.decay = decay
        self.eps = eps
        self.sq = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr_scale: float = 1.0) -> None:
        for name, param in self.params.items():
            _rmsprop_step(param, grads[name], self.sq[name], self.lrs[name] * lr_scale, self.decay, self.eps)


@dataclass
class TrainingData:
    """All training pixels flattened into one ray table."""

    rays: RayBatch
    rgb: np.ndarray
    thermal: np.ndarray

    @classmethod
    def from_pairs(cls, intr, pairs, bounds) -> "TrainingData":
        origins, dirs, rgb, th = [], [], [], []
        for pair in pairs:
            o, d = generate_rays(intr, pair.pose)
            origins.append(o)
            dirs.append(d)
            rgb.append(pair.rgb.reshape(-1, 3))
            th.append(pair.thermal.reshape(-1))
        rays = RayBatch.from_rays(np.concatenate(origins), np.concatenate(dirs), bounds)
        return cls(rays, np.concatenate(rgb), np.concatenate(th))


@dataclass
class TrainResult:
    grid: VoxelGrid
    background: np.ndarray
    history: List[LossTerms] = field(default_factory=list)
    config: Optional[TrainConfig] = None


def train(scene, config: TrainConfig, callback: Optional[Callable[[int, LossTerms], None]] = None,
          log_every: int = 100) -> TrainResult:
    """Optimize density, SH color, temperature and background on ``scene``.

    Each iteration draws ``batch_size`` pixels (with their paired RGB and
    thermal values) uniformly from all training views, then takes one
    RMSProp step. Density is clamped to ``>= density_min`` and temperature to
    ``[0, 1]`` after every step.
    """
    rng = np.random.default_rng(config.seed)
    grid = initial_grid(config, scene.bounds, scene.temp_range)
    background = initial_background(config)
    result = TrainResult(grid, background, [], config)
    if config.iterations == 0:
        return result
    data = TrainingData.from_pairs(scene.intrinsics, scene.split("train"), scene.bounds)
    step = config.step_ratio * float(np.min(grid.voxel_size))
    weights = config.weights
    opt = RMSProp(
        {"density": grid.density, "sh": grid.sh, "temperature": grid.temperature, "background": background},
        {"density": config.lr_density, "sh": config.lr_sh, "temperature": config.lr_temperature,
         "background": config.lr_background},
        config.rms_decay, config.rms_eps,
    )
    buffers = grid.zeros_like_fields()
    buffers.background = np.zeros_like(background)
    n_pix = len(data.rays)
    batch = min(config.batch_size, n_pix)
    for it in range(config.iterations):
        sel = np.sort(rng.choice(n_pix, size=batch, replace=False))
        for buf in (buffers.density, buffers.sh, buffers.temperature, buffers.background):
            buf.fill(0.0)
        terms = total_loss(grid, background, data.rays.subset(sel), data.rgb[sel], data.thermal[sel],
                           weights, step, buffers, config.thermal_density_grad, config.skip_empty)
        for name in LOSS_TERMS:
            value = getattr(terms, name)
            if not math.isfinite(value):
                raise NonFiniteLossError(it, name, value)
        scale = config.lr_final_ratio ** (it / max(config.iterations - 1, 1))
        opt.step({"density": buffers.density, "sh": buffers.sh, "temperature": buffers.temperature,
                  "background": buffers.background}, scale)
        np.maximum(grid.density, config.density_min, out=grid.density)
        np.clip(grid.temperature, 0.0, 1.0, out=grid.temperature)
        result.history.append(terms)
        if callback is not None:
            callback(it, terms)
        if log_every and (it % log_every == 0 or it == config.iterations - 1):
            log.info("iter %d total %.6f rgb %.6f thermal_l1 %.6f", it, terms.total, terms.rgb_l2,
                     terms.thermal_l1)
    return result


def write_loss_csv(path, history: List[LossTerms]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iteration",) + LOSS_TERMS)
        for it, terms in enumerate(history):
            w.writerow([it] + [repr(float(v)) for v in terms.as_row()])
    return path
