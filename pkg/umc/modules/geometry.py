r"""
Rigid 2D poses, alignment of feature grids between agent frames and axis-aligned box IoU.

Every grid is centred on the agent owning it. Cell ``(row, col)`` of an ``H x W`` grid has
metric centre ``x = (col + 0.5 - W / 2) * cell_size``, ``y = (row + 0.5 - H / 2) * cell_size``.
"""
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch

from umc.errors import ShapeError


# Sampling coordinates this close to an integer are snapped onto it, which keeps warps by whole
# cells (and by multiples of a quarter turn) exact.
_SNAP_EPS = 1e-9


def _normalize_yaw(yaw: float) -> float:
    yaw = math.atan2(math.sin(yaw), math.cos(yaw))
    return math.pi if yaw <= -math.pi else yaw


@dataclass(frozen=True)
class Pose2:
    r"""
    A rigid transform of the plane, or the pose of an agent in the world.

    As a transform it maps a point ``p`` to ``R(yaw) p + (x, y)``. Yaw is normalized to
    ``(-pi, pi]`` on construction.
    """

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(value) for value in (self.x, self.y, self.yaw)):
            raise ValueError(f"Pose has non-finite fields: {self}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", _normalize_yaw(float(self.yaw)))

    @property
    def is_identity(self) -> bool:
        return self.x == 0.0 and self.y == 0.0 and self.yaw == 0.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        r"""Transform an array of points with shape (..., 2)."""
        cos, sin = math.cos(self.yaw), math.sin(self.yaw)
        rotation = np.array([[cos, -sin], [sin, cos]])
        return np.asarray(points, dtype=np.float64) @ rotation.T + np.array([self.x, self.y])


def relative_pose(src: Pose2, dst: Pose2) -> Pose2:
    r"""
    Transform mapping coordinates in the frame of ``src`` into the frame of ``dst``, both poses
    given in a common (world) frame.

    Examples
    --------
    >>> relative_pose(Pose2(1.0, 0.0, 0.0), Pose2(0.0, 0.0, math.pi / 2))
    Pose2(x=6.123233995736766e-17, y=-1.0, yaw=-1.5707963267948966)
    """
    dx, dy = src.x - dst.x, src.y - dst.y
    cos, sin = math.cos(dst.yaw), math.sin(dst.yaw)
    return Pose2(cos * dx + sin * dy, -sin * dx + cos * dy, src.yaw - dst.yaw)


def compose(first: Pose2, second: Pose2) -> Pose2:
    r"""Transform which applies ``first`` and then ``second``."""
    cos, sin = math.cos(second.yaw), math.sin(second.yaw)
    return Pose2(
        cos * first.x - sin * first.y + second.x,
        sin * first.x + cos * first.y + second.y,
        first.yaw + second.yaw,
    )


def inverse(transform: Pose2) -> Pose2:
    cos, sin = math.cos(transform.yaw), math.sin(transform.yaw)
    return Pose2(
        -(cos * transform.x + sin * transform.y),
        -(-sin * transform.x + cos * transform.y),
        -transform.yaw,
    )


def cell_centers(height: int, width: int, cell_size: float) -> Tuple[torch.Tensor, torch.Tensor]:
    r"""
    Metric centres of all cells of a grid.

    Returns
    -------
    Tuple[torch.Tensor, torch.Tensor]
        ``x`` and ``y`` coordinates, both of shape (height, width).
    """
    cols = (torch.arange(width, dtype=torch.float64) + 0.5 - width / 2) * cell_size
    rows = (torch.arange(height, dtype=torch.float64) + 0.5 - height / 2) * cell_size
    y, x = torch.meshgrid(rows, cols, indexing="ij")
    return x, y


def _snap(coordinates: torch.Tensor) -> torch.Tensor:
    rounded = torch.round(coordinates)
    return torch.where((coordinates - rounded).abs() < _SNAP_EPS, rounded, coordinates)


def warp_grid(feature: torch.Tensor, transform: Pose2, cell_size: float) -> torch.Tensor:
    r"""
    Align a feature grid to another frame. Output cell ``p`` is sampled bilinearly from the input
    at ``inverse(transform)(p)``, samples falling outside the input are zero.

    Parameters
    ----------
    feature: torch.Tensor
        Feature grid of shape (channels, height, width).
    transform: Pose2
        Transform from the frame of ``feature`` into the output frame, typically the result of
        :func:`relative_pose`.
    cell_size: float
        Metric side length of one cell.

    Returns
    -------
    torch.Tensor
        Aligned grid with the same shape as ``feature``.
    """
    if cell_size <= 0:
        raise ShapeError(f"cell_size must be positive, found {cell_size}.")
    if feature.dim() != 3:
        raise ShapeError(f"warp_grid expects a (C, H, W) grid, found {tuple(feature.shape)}.")
    if transform.is_identity:
        return feature.clone()

    channels, height, width = feature.shape
    x, y = cell_centers(height, width, cell_size)

    # Source location of every output cell.
    back = inverse(transform)
    cos, sin = math.cos(back.yaw), math.sin(back.yaw)
    src_x = cos * x - sin * y + back.x
    src_y = sin * x + cos * y + back.y

    # shape: (height, width)
    col = _snap(src_x / cell_size + width / 2 - 0.5)
    row = _snap(src_y / cell_size + height / 2 - 0.5)

    row0, col0 = torch.floor(row), torch.floor(col)
    frac_row, frac_col = row - row0, col - col0
    row0, col0 = row0.long(), col0.long()

    output = torch.zeros_like(feature)
    corners = [
        (row0, col0, (1 - frac_row) * (1 - frac_col)),
        (row0, col0 + 1, (1 - frac_row) * frac_col),
        (row0 + 1, col0, frac_row * (1 - frac_col)),
        (row0 + 1, col0 + 1, frac_row * frac_col),
    ]
    for corner_row, corner_col, weight in corners:
        valid = (
            (corner_row >= 0) & (corner_row < height) & (corner_col >= 0) & (corner_col < width)
        )
        valid = valid & (weight != 0)
        if not bool(valid.any()):
            continue
        safe_row = corner_row.clamp(0, height - 1)
        safe_col = corner_col.clamp(0, width - 1)
        # shape: (channels, height, width)
        sampled = feature[:, safe_row, safe_col]
        output = output + torch.where(valid, weight, torch.zeros_like(weight)) * sampled
    return output


@dataclass(frozen=True)
class BevBox:
    r"""Axis-aligned box in a bird's-eye view frame, centre and size in meters."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (math.isfinite(self.cx) and math.isfinite(self.cy)):
            raise ValueError(f"Box centre must be finite: {self}")
        if not (self.w > 0 and self.h > 0 and math.isfinite(self.w) and math.isfinite(self.h)):
            raise ValueError(f"Box size must be positive: {self}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def bounds(self) -> Tuple[float, float, float, float]:
        r"""Return ``(x_min, y_min, x_max, y_max)``."""
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def transformed(self, transform: Pose2) -> "BevBox":
        r"""
        Move the box into another frame. Boxes stay axis-aligned, so width and height are
        swapped when the rotation is closer to a quarter turn than to a half turn.
        """
        cx, cy = transform.apply(np.array([self.cx, self.cy]))
        if abs(math.sin(transform.yaw)) > abs(math.cos(transform.yaw)):
            return BevBox(float(cx), float(cy), self.h, self.w)
        return BevBox(float(cx), float(cy), self.w, self.h)


def iou(a: BevBox, b: BevBox) -> float:
    r"""Intersection over union of two axis-aligned boxes, in ``[0, 1]``."""
    ax0, ay0, ax1, ay1 = a.bounds()
    bx0, by0, bx1, by1 = b.bounds()
    overlap_w = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    overlap_h = max(0.0, min(ay1, by1) - max(ay0, by0))
    intersection = overlap_w * overlap_h
    union = a.area + b.area - intersection
    return intersection / union if union > 0 else 0.0
