"""Image quality and trajectory metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dynamics import Trajectory

SSIM_WINDOW = 7

RESULTS_HEADER = ["method", "task", "lambda", "N", "K", "seed", "psnr", "ssim", "terminal_loss",
                  "energy", "wall_time_s"]


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    terminal_loss: float
    control_energy: float
    trajectory_distance: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def psnr(x, x_ref, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    x, x_ref = np.asarray(x, dtype=np.float64), np.asarray(x_ref, dtype=np.float64)
    if x.shape != x_ref.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {x_ref.shape}")
    if data_range <= 0:
        raise ValueError(f"psnr: data_range must be positive (got {data_range})")
    mse = float(np.mean((x - x_ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def ssim(x, x_ref, data_range: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean single-scale SSIM over all fully-contained ``window``x``window`` uniform windows."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(x_ref, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 2:
        raise ValueError(f"ssim: expected 2-D images, got shape {x.shape}")
    if min(x.shape) < window:
        raise ValueError(f"ssim: image {x.shape} smaller than the {window}x{window} window")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2

    def local_mean(a):
        return ndimage.uniform_filter(a, size=window, mode="constant")

    mx, my = local_mean(x), local_mean(y)
    sxx = local_mean(x * x) - mx * mx
    syy = local_mean(y * y) - my * my
    sxy = local_mean(x * y) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    r = window // 2
    valid = (slice(r, x.shape[0] - r), slice(r, x.shape[1] - r))
    return float(np.mean((num / den)[valid]))


def trajectory_distance(a: Trajectory, b: Trajectory) -> float:
    """Mean over grid nodes of the Euclidean distance between the two trajectories."""
    if a.times.shape != b.times.shape or not np.allclose(a.times, b.times, rtol=0, atol=1e-12):
        raise ValueError("trajectory_distance: trajectories live on different grids")
    return float(np.mean(np.linalg.norm(a.states - b.states, axis=1)))


def terminal_error(traj: Trajectory, target) -> float:
    return float(np.linalg.norm(traj.terminal - np.asarray(target, dtype=np.float64)))


def append_results(path, row: dict) -> None:
    """Append one row to a results CSV, writing the header if the file is new."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULTS_HEADER, extrasaction="ignore")
        if new:
            w.writeheader()
        w.writerow({k: row.get(k, "") for k in RESULTS_HEADER})
