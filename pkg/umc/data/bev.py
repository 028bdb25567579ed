r"""
Voxel occupancy of agent-frame point sets, the input of the shared encoder.

Point ``(x, y, z)`` lands in column ``floor(x / cell_size + W / 2)``, row
``floor(y / cell_size + H / 2)`` and slab ``floor((z - z_min) / slab_height)``. Points outside
the grid or the vertical range are dropped.
"""
import math
from typing import NamedTuple

import numpy as np
import torch

from umc.config import Config
from umc.errors import ConfigError


class BevGrid(NamedTuple):
    r"""Geometry of the BEV raster of a single agent."""

    cell_size: float
    height: int
    width: int
    z_min: float
    z_max: float
    slab_height: float

    @classmethod
    def from_config(cls, config: Config) -> "BevGrid":
        _C = config
        grid = cls(
            cell_size=float(_C.BEV.CELL_SIZE),
            height=int(_C.BEV.SIZE[0]),
            width=int(_C.BEV.SIZE[1]),
            z_min=float(_C.BEV.Z_RANGE[0]),
            z_max=float(_C.BEV.Z_RANGE[1]),
            slab_height=float(_C.BEV.SLAB_HEIGHT),
        )
        grid.check()
        return grid

    def check(self):
        if self.cell_size <= 0 or self.slab_height <= 0:
            raise ConfigError("BEV cell size and slab height must be positive.")
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"BEV size must be positive, found {self.height}x{self.width}.")
        if self.z_max <= self.z_min:
            raise ConfigError(f"Empty BEV z range [{self.z_min}, {self.z_max}].")

    @property
    def channels(self) -> int:
        r"""Number of height slabs, the last one may be partial."""
        return int(math.ceil((self.z_max - self.z_min) / self.slab_height - 1e-9))

    @property
    def extent(self) -> float:
        r"""Metric side length covered along the row axis."""
        return self.height * self.cell_size

    def contains(self, x: float, y: float) -> bool:
        return abs(x) < self.width * self.cell_size / 2 and abs(y) < self.extent / 2


def rasterize_bev(points: np.ndarray, grid: BevGrid) -> torch.Tensor:
    r"""
    Binary occupancy of a point set.

    Parameters
    ----------
    points: np.ndarray
        Points of shape (N, 3), in the agent frame, meters.
    grid: BevGrid
        Raster geometry.

    Returns
    -------
    torch.Tensor
        Float64 grid of shape (slabs, height, width) holding ones at occupied voxels.
    """
    occupancy = torch.zeros(grid.channels, grid.height, grid.width, dtype=torch.float64)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        return occupancy

    cols = np.floor(points[:, 0] / grid.cell_size + grid.width / 2).astype(np.int64)
    rows = np.floor(points[:, 1] / grid.cell_size + grid.height / 2).astype(np.int64)
    slabs = np.floor((points[:, 2] - grid.z_min) / grid.slab_height).astype(np.int64)

    inside = (
        (cols >= 0)
        & (cols < grid.width)
        & (rows >= 0)
        & (rows < grid.height)
        & (points[:, 2] >= grid.z_min)
        & (points[:, 2] < grid.z_max)
        & (slabs < grid.channels)
    )
    occupancy[
        torch.from_numpy(slabs[inside]),
        torch.from_numpy(rows[inside]),
        torch.from_numpy(cols[inside]),
    ] = 1.0
    return occupancy
