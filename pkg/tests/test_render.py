from pathlib import Path

import numpy as np
import pytest

from conftest import make_field, make_flat_grid
from uavplace.render import INVALID_RGB, render, save_cdf_figure, save_learning_curve_figure, sinr_colormap
from uavplace.rl import EpisodeRecord


def parse_ppm(path):
    tokens = Path(path).read_text().split()
    assert tokens[0] == "P3"
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    assert maxval == 255
    pixels = np.array(tokens[4:], dtype=np.int64).reshape(h, w, 3)
    return pixels


def demo_world():
    n = 6
    heights = np.zeros((n, n))
    heights[2, 2] = 25.0
    from uavplace.gridmap import HeightGrid

    grid = HeightGrid(ncols=n, nrows=n, spacing_m=4.0, heights=heights)
    values = np.tile(np.linspace(-100.0, 40.0, n), (n, 1))
    valid = np.ones((n, n), dtype=bool)
    valid[2, 2] = False
    values = np.where(valid, values, np.nan)
    field = make_field(grid, values, valid, user_cell=(5, 0))
    return grid, field


def test_pixel_count_matches_scale(tmp_path):
    grid, field = demo_world()
    for scale in (1, 3):
        hpath, spath = render(grid, field, [], tmp_path / f"s{scale}", scale=scale)
        for p in (hpath, spath):
            img = parse_ppm(p)
            assert img.shape == (grid.nrows * scale, grid.ncols * scale, 3)
            assert img.size == grid.nrows * grid.ncols * scale * scale * 3


def test_invalid_cells_use_reserved_color(tmp_path):
    grid, field = demo_world()
    _, spath = render(grid, field, [], tmp_path / "out", scale=1)
    img = parse_ppm(spath)
    assert tuple(img[2, 2]) == INVALID_RGB
    # no valid cell may render in the reserved color
    valid_pixels = img[field.valid]
    assert not np.any(np.all(valid_pixels == np.array(INVALID_RGB), axis=-1))


def test_colormap_never_emits_reserved_or_marker_colors():
    rgb = sinr_colormap(np.linspace(0, 1, 4001)).reshape(-1, 3)
    for forbidden in (INVALID_RGB, (255, 255, 255), (0, 255, 0), (0, 0, 255)):
        assert not np.any(np.all(rgb == np.array(forbidden), axis=-1)), forbidden


def test_trajectory_and_markers(tmp_path):
    grid, field = demo_world()
    traj = [[(0, 0), (0, 1), (1, 1)]]
    hpath, spath = render(grid, field, traj, tmp_path / "t", scale=2)
    img = parse_ppm(spath)
    assert tuple(img[0, 0]) == (0, 255, 0)  # start marker
    assert tuple(img[0, 2]) == (255, 255, 255)  # path cell (0,1) at scale 2
    assert tuple(img[10, 0]) == (0, 0, 255)  # user marker at (5,0)


def test_empty_trajectories_render_bare_heatmap(tmp_path):
    grid, field = demo_world()
    hpath, spath = render(grid, field, [], tmp_path / "bare", scale=1)
    img = parse_ppm(spath)
    assert img.shape == (6, 6, 3)


def test_out_of_bounds_trajectory_rejected(tmp_path):
    grid, field = demo_world()
    with pytest.raises(ValueError, match="out of bounds"):
        render(grid, field, [[(99, 0)]], tmp_path / "bad")


def test_matplotlib_figures(tmp_path):
    curve = [
        EpisodeRecord(episode=i, start_sinr_db=-10.0, end_sinr_db=0.0, steps=5, reached_target=False,
                      trailing_mean_increase=float(i))
        for i in range(1, 6)
    ]
    lc = tmp_path / "curve.png"
    save_learning_curve_figure(curve, lc, upper_bound_db=12.0)
    assert lc.stat().st_size > 0
    cdf_png = tmp_path / "cdf.png"
    save_cdf_figure({"random": np.linspace(0, 0.5, 11), "trained": np.linspace(0, 0.9, 11)}, cdf_png)
    assert cdf_png.stat().st_size > 0
