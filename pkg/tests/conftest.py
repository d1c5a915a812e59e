import numpy as np
import pytest

from uavplace.env import EpisodeConfig
from uavplace.gridmap import CityGenParams, HeightGrid, generate_city
from uavplace.propagation import RadioParams, SinrField, compute_sinr_field


def make_flat_grid(n: int = 20, spacing: float = 4.0) -> HeightGrid:
    return HeightGrid(ncols=n, nrows=n, spacing_m=spacing, heights=np.zeros((n, n)))


def make_field(
    grid: HeightGrid,
    values: np.ndarray,
    valid: np.ndarray | None = None,
    user_cell=(0, 0),
    altitude_m: float = 10.0,
) -> SinrField:
    """Hand-crafted field for exact reward/observation checks."""
    if valid is None:
        valid = np.ones_like(values, dtype=bool)
    return SinrField(
        ncols=grid.ncols,
        nrows=grid.nrows,
        spacing_m=grid.spacing_m,
        user_cell=user_cell,
        altitude_m=altitude_m,
        values=values,
        valid=valid,
    )


@pytest.fixture(scope="session")
def city_grid() -> HeightGrid:
    return generate_city(CityGenParams(seed=3, extent_m=(128, 128), building_density=0.25))


@pytest.fixture(scope="session")
def city_field(city_grid):
    radio = RadioParams(noise_plus_interference_dbm=-55.0, deadzone_floor_db=-130.0)
    return compute_sinr_field(city_grid, (2, 3), radio, seed=1)


@pytest.fixture
def test_episode_config() -> EpisodeConfig:
    return EpisodeConfig(obs_cells=21, t_max=100, rotation_quarter_turns=0)
