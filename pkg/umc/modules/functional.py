r"""
Dense kernels every forward equation of the pipeline is written with. All of them operate on
single (un-batched) feature grids, ``torch.float64`` tensors of shape (channels, height, width),
and are pure: they never modify their inputs.
"""
from typing import List, Optional

import torch
from torch.nn import functional as F

from umc.errors import ShapeError


# Feature grids are plain tensors, this alias only documents intent in signatures.
FeatureGrid = torch.Tensor

# Added to the per-pixel norm in :func:`l2norm_channels`.
L2NORM_EPS = 1e-10


def check_grid(grid: torch.Tensor, name: str = "input") -> torch.Tensor:
    r"""
    Validate that ``grid`` is a finite float64 feature grid of shape (channels, height, width).

    Returns the grid unchanged, so it can be used inline.
    """
    if not isinstance(grid, torch.Tensor) or grid.dim() != 3:
        raise ShapeError(f"{name} must be a (channels, height, width) tensor.")
    if min(grid.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {tuple(grid.shape)}.")
    if grid.dtype != torch.float64:
        raise ShapeError(f"{name} must be float64, found {grid.dtype}.")
    if not bool(torch.isfinite(grid).all()):
        raise ShapeError(f"{name} has non-finite entries.")
    return grid


def conv2d(
    input: FeatureGrid,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> FeatureGrid:
    r"""
    Cross-correlation of a feature grid with a bank of filters, zero padded.

    Parameters
    ----------
    input: torch.Tensor
        Feature grid of shape (in_channels, height, width).
    weight: torch.Tensor
        Filters of shape (out_channels, in_channels, kernel_height, kernel_width), kernel sizes
        must be odd.
    bias: torch.Tensor, optional (default = None)
        Bias of shape (out_channels, ).
    stride: int, optional (default = 1)
    padding: int, optional (default = 0)

    Returns
    -------
    torch.Tensor
        Output grid of shape (out_channels, floor((H + 2p - kh) / stride) + 1, ...).
    """
    if input.dim() != 3:
        raise ShapeError(f"conv2d input must be (C, H, W), found {tuple(input.shape)}.")
    if weight.dim() != 4:
        raise ShapeError(f"conv2d weight must be 4-dimensional, found {tuple(weight.shape)}.")

    out_channels, in_channels, kernel_height, kernel_width = weight.shape
    if in_channels != input.size(0):
        raise ShapeError(
            f"conv2d weight expects {in_channels} input channels, input has {input.size(0)}."
        )
    if kernel_height % 2 == 0 or kernel_width % 2 == 0:
        raise ShapeError(f"conv2d kernels must be odd, found {kernel_height}x{kernel_width}.")
    if bias is not None and tuple(bias.shape) != (out_channels,):
        raise ShapeError(f"conv2d bias must have shape ({out_channels}, ).")
    if stride < 1 or padding < 0:
        raise ShapeError(f"Invalid stride {stride} or padding {padding}.")
    if input.size(1) + 2 * padding < kernel_height or input.size(2) + 2 * padding < kernel_width:
        raise ShapeError("conv2d kernel is larger than the padded input.")

    # shape: (1, out_channels, height', width')
    output = F.conv2d(input.unsqueeze(0), weight, bias, stride=stride, padding=padding)
    return output.squeeze(0)


def sigmoid(input: FeatureGrid) -> FeatureGrid:
    r"""Elementwise logistic function ``1 / (1 + exp(-x))``."""
    return torch.sigmoid(input)


def relu(input: FeatureGrid) -> FeatureGrid:
    return torch.relu(input)


def channel_max(input: FeatureGrid) -> FeatureGrid:
    r"""Global max pooling along channels, output has a single channel."""
    return input.max(dim=0, keepdim=True).values


def l2norm_channels(input: FeatureGrid, scale: torch.Tensor) -> FeatureGrid:
    r"""
    Normalize every pixel's channel vector to unit L2 norm and rescale each channel.

    ``out(c, y, x) = in(c, y, x) / (||in(:, y, x)|| + 1e-10) * scale[c]``

    Parameters
    ----------
    input: torch.Tensor
        Feature grid of shape (channels, height, width).
    scale: torch.Tensor
        Per-channel scale of shape (channels, ).
    """
    if scale.dim() != 1 or scale.size(0) != input.size(0):
        raise ShapeError(
            f"l2norm scale has shape {tuple(scale.shape)}, expected ({input.size(0)}, )."
        )
    norm = input.pow(2).sum(dim=0, keepdim=True).sqrt() + L2NORM_EPS
    return input / norm * scale.view(-1, 1, 1)


def upsample2x(input: FeatureGrid) -> FeatureGrid:
    r"""Double height and width by bilinear interpolation (corner alignment off)."""
    output = F.interpolate(
        input.unsqueeze(0), scale_factor=2, mode="bilinear", align_corners=False
    )
    return output.squeeze(0)


def softmax_over_stack(maps: List[FeatureGrid]) -> List[FeatureGrid]:
    r"""
    Per-cell softmax across a stack of single-channel maps with identical dimensions.

    Parameters
    ----------
    maps: List[torch.Tensor]
        One or more maps of shape (1, height, width).

    Returns
    -------
    List[torch.Tensor]
        Normalized maps in the same order, summing to one at every cell.
    """
    if len(maps) == 0:
        raise ShapeError("softmax_over_stack needs at least one map.")
    for single_map in maps:
        if single_map.dim() != 3 or single_map.size(0) != 1:
            raise ShapeError("softmax_over_stack expects single-channel (1, H, W) maps.")
        if single_map.shape != maps[0].shape:
            raise ShapeError("softmax_over_stack maps must share their dimensions.")

    # shape: (num_maps, 1, height, width)
    stacked = torch.stack(maps, dim=0)
    normalized = torch.softmax(stacked, dim=0)
    return list(normalized.unbind(dim=0))
