"""Image quality metrics (PSNR, SSIM, MAE) for rendered views."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 100.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
METRIC_COLUMNS = ("psnr", "ssim", "mae")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_value: float = 1.0, cap: float = PSNR_CAP) -> float:
    """``10 log10(max^2 / MSE)``, reported as ``cap`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(max_value ** 2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps centred on the middle sample."""
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def _filter_valid(img, w):
    half = len(w) // 2
    out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim(a, b, data_range: float = 1.0, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean SSIM with a Gaussian window over the fully-covered (valid) region.

    Multi-channel images ``(H, W, C)`` average the per-channel maps. For
    images smaller than the window, the window shrinks to the largest odd
    size that fits.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise ValueError("ssim expects (H, W) or (H, W, C) images")
    size = min(window, a.shape[0], a.shape[1])
    size -= 1 - size % 2
    w = gaussian_window(size, sigma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    maps = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, w), _filter_valid(y, w)
        vx = _filter_valid(x * x, w) - mx * mx
        vy = _filter_valid(y * y, w) - my * my
        cxy = _filter_valid(x * y, w) - mx * my
        maps.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(maps))


def mae(a, b, temp_range: Optional[Sequence[float]] = None) -> float:
    """Mean absolute difference; scaled to degrees C when ``temp_range`` is given."""
    a, b = _pair(a, b)
    scale = 1.0 if temp_range is None else float(temp_range[1]) - float(temp_range[0])
    return float(np.mean(np.abs(a - b))) * scale


def image_metrics(rendered, truth, channel: str = "rgb", temp_range=None) -> Dict[str, float]:
    """PSNR, SSIM and MAE for one image; thermal MAE is in degrees C."""
    if channel == "thermal" and temp_range is None:
        raise ValueError("thermal MAE needs temp_range")
    return {
        "psnr": psnr(rendered, truth),
        "ssim": ssim(rendered, truth),
        "mae": mae(rendered, truth, temp_range if channel == "thermal" else None),
    }


@dataclass
class MetricRow:
    scene: str
    view: str
    channel: str
    psnr: float
    ssim: float
    mae: float


def aggregate(rows: List[MetricRow]) -> List[MetricRow]:
    """Per-(scene, channel) means over views, labelled ``view='mean'``."""
    out = []
    keys = sorted({(r.scene, r.channel) for r in rows})
    for scene, channel in keys:
        sel = [r for r in rows if r.scene == scene and r.channel == channel]
        out.append(MetricRow(scene, "mean", channel,
                             *(float(np.mean([getattr(r, m) for r in sel])) for m in METRIC_COLUMNS)))
    return out


def write_metrics_csv(path, rows: List[MetricRow]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("scene", "view", "channel") + METRIC_COLUMNS)
        for r in rows:
            w.writerow([r.scene, r.view, r.channel] + [repr(float(getattr(r, m))) for m in METRIC_COLUMNS])
    return path


def evaluate_views(scene, renders: Dict[str, tuple], split: str = "test",
                   scene_name: str = "scene") -> List[MetricRow]:
    """Score ``renders[name] = (rgb, thermal_normalized)`` against a scene split.

    Returns one row per view and channel followed by the per-channel means.
    """
    rows = []
    for pair in scene.split(split):
        if pair.name not in renders:
            raise KeyError(f"no render for view {pair.name}")
        rgb, thermal = renders[pair.name]
        for channel, img, truth in (("rgb", rgb, pair.rgb), ("thermal", thermal, pair.thermal)):
            m = image_metrics(img, truth, channel, scene.temp_range)
            rows.append(MetricRow(scene_name, pair.name, channel, m["psnr"], m["ssim"], m["mae"]))
    return rows + aggregate(rows)
