"""Map and heatmap rendering.

Episode imagery (relative-height map and SINR heatmap with overlaid
trajectories) is written as plain text PPM so outputs are bit-exact and
dependency free. Report-style figures (learning curves, steps CDFs) go
through matplotlib to PNG alongside the CSV outputs.
"""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .gridmap import HeightGrid
from .propagation import SinrField

__all__ = [
    "INVALID_RGB",
    "render",
    "sinr_colormap",
    "save_learning_curve_figure",
    "save_cdf_figure",
]

INVALID_RGB = (255, 0, 255)  # reserved; the SINR colormap never produces it
_TRAJECTORY_RGB = (255, 255, 255)
_START_RGB = (0, 255, 0)
_USER_RGB = (0, 0, 255)

# Piecewise-linear stops from low to high SINR.
_SINR_STOPS = np.array(
    [
        [0, 0, 96],
        [0, 80, 255],
        [0, 200, 120],
        [255, 220, 0],
        [255, 40, 0],
    ],
    dtype=np.float64,
)


def sinr_colormap(t: np.ndarray) -> np.ndarray:
    """Map values in [0,1] to RGB; clamped outside."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    pos = t * (len(_SINR_STOPS) - 1)
    i = np.minimum(pos.astype(np.intp), len(_SINR_STOPS) - 2)
    frac = (pos - i)[..., None]
    rgb = _SINR_STOPS[i] * (1.0 - frac) + _SINR_STOPS[i + 1] * frac
    return rgb.astype(np.uint8)


def _height_image(grid: HeightGrid, altitude_m: float) -> np.ndarray:
    rel = grid.heights - altitude_m
    img = np.zeros((grid.nrows, grid.ncols, 3), dtype=np.uint8)
    below = rel < 0
    frac_below = np.clip(grid.heights / max(altitude_m, 1e-9), 0.0, 1.0)
    gray = (200 - 120 * frac_below).astype(np.uint8)
    for ch in range(3):
        img[..., ch] = np.where(below, gray, 0)
    frac_above = np.clip(rel / 50.0, 0.0, 1.0)
    img[..., 0] = np.where(below, img[..., 0], (180 - 60 * frac_above).astype(np.uint8))
    img[..., 1] = np.where(below, img[..., 1], (60 - 40 * frac_above).astype(np.uint8))
    img[..., 2] = np.where(below, img[..., 2], (40 - 30 * frac_above).astype(np.uint8))
    return img


def _sinr_image(field: SinrField) -> np.ndarray:
    vals = np.nan_to_num(field.values, nan=0.0)
    lo, hi = -140.0, 45.0
    t = (vals - lo) / (hi - lo)
    img = sinr_colormap(t)
    img[~field.valid] = INVALID_RGB
    return img


def _overlay(img: np.ndarray, trajectories, user_cell) -> None:
    for path in trajectories:
        for r, c in path:
            img[r, c] = _TRAJECTORY_RGB
    for path in trajectories:
        if path:
            r, c = path[0]
            img[r, c] = _START_RGB
    img[user_cell] = _USER_RGB


def _write_ppm(img: np.ndarray, path, scale: int) -> None:
    big = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    h, w = big.shape[:2]
    with open(path, "w", newline="\n") as fh:
        fh.write(f"P3\n{w} {h}\n255\n")
        for row in big:
            fh.write(" ".join(str(v) for v in row.reshape(-1)))
            fh.write("\n")


def render(
    grid: HeightGrid,
    field: SinrField,
    trajectories: Sequence[Sequence[tuple[int, int]]],
    path,
    scale: int = 4,
) -> tuple[str, str]:
    """Write `<path>_height.ppm` and `<path>_sinr.ppm`.

    Both images carry the trajectories (white), their start cells (green) and
    the user cell (blue); invalid cells show the reserved magenta. Each grid
    cell becomes a scale x scale pixel block.
    """
    if scale < 1:
        raise ValueError("scale must be >= 1")
    for traj in trajectories:
        for cell in traj:
            if not grid.in_bounds(cell):
                raise ValueError(f"trajectory cell {cell} out of bounds")
    height_img = _height_image(grid, field.altitude_m)
    sinr_img = _sinr_image(field)
    for img in (height_img, sinr_img):
        _overlay(img, trajectories, field.user_cell)
    height_path = f"{path}_height.ppm"
    sinr_path = f"{path}_sinr.ppm"
    _write_ppm(height_img, height_path, scale)
    _write_ppm(sinr_img, sinr_path, scale)
    return height_path, sinr_path


# -- matplotlib report figures -------------------------------------------------


def save_learning_curve_figure(curve, path, upper_bound_db: float | None = None) -> None:
    """Trailing-100 mean SINR increase per episode, with the optional bound."""
    episodes = [rec.episode for rec in curve]
    trailing = [rec.trailing_mean_increase for rec in curve]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(episodes, trailing, label="trailing-100 mean SINR increase")
    if upper_bound_db is not None:
        ax.axhline(upper_bound_db, color="k", linestyle="--", label="upper bound")
    ax.set_xlabel("episode")
    ax.set_ylabel("SINR increase (dB)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_cdf_figure(cdfs: Mapping[str, np.ndarray], path) -> None:
    """Steps-to-convergence CDFs, one line per policy label."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, cdf in cdfs.items():
        ax.step(np.arange(len(cdf)), cdf, where="post", label=label)
    ax.set_xlabel("steps until target SINR")
    ax.set_ylabel("cumulative fraction of episodes")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
