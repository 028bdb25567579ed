import numpy as np
import pytest
import torch

from umc.config import Config
from umc.data.bev import BevGrid, rasterize_bev
from umc.errors import ConfigError


@pytest.fixture
def grid():
    return BevGrid(cell_size=0.5, height=8, width=8, z_min=0.0, z_max=2.0, slab_height=0.5)


def test_from_config_defaults():
    bev = BevGrid.from_config(Config())
    assert (bev.height, bev.width, bev.channels) == (64, 64, 8)
    assert bev.extent == 32.0


def test_partial_last_slab():
    bev = BevGrid(1.0, 4, 4, 0.0, 1.0, 0.3)
    assert bev.channels == 4


def test_invalid_grids_raise():
    with pytest.raises(ConfigError):
        BevGrid(0.0, 4, 4, 0.0, 1.0, 0.5).check()
    with pytest.raises(ConfigError):
        BevGrid(1.0, 0, 4, 0.0, 1.0, 0.5).check()
    with pytest.raises(ConfigError):
        BevGrid(1.0, 4, 4, 1.0, 1.0, 0.5).check()
    with pytest.raises(ConfigError):
        BevGrid.from_config(Config(None, ["BEV.CELL_SIZE", -1.0]))


def test_rasterize_bev_cell_assignment(grid):
    points = np.array(
        [
            [0.1, 0.1, 0.1],
            [-1.9, 1.9, 1.9],
            [0.2, 0.2, 0.3],
        ]
    )
    occupancy = rasterize_bev(points, grid)
    assert occupancy.shape == (4, 8, 8)
    assert occupancy.dtype == torch.float64
    assert occupancy[0, 4, 4] == 1.0
    assert occupancy[3, 7, 0] == 1.0
    # Two points in the same voxel still mark it once.
    assert float(occupancy.sum()) == 2.0


def test_rasterize_bev_drops_points_outside(grid):
    points = np.array(
        [
            [2.0, 0.0, 1.0],
            [0.0, -2.01, 1.0],
            [0.0, 0.0, -0.1],
            [0.0, 0.0, 2.0],
        ]
    )
    assert float(rasterize_bev(points, grid).sum()) == 0.0
    assert float(rasterize_bev(np.zeros((0, 3)), grid).sum()) == 0.0


def test_contains(grid):
    assert grid.contains(0.0, 0.0)
    assert grid.contains(1.99, -1.99)
    assert not grid.contains(2.0, 0.0)
