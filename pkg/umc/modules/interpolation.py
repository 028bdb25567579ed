r"""
Reconstruction of a dense feature grid from a received sparse packet.

Unobserved cells are filled with a Gaussian-weighted average of the cells in a square
(Chebyshev) neighbourhood. Weights decay with the Euclidean distance, ``exp(-lambda^2 d^2)``.
"""
from dataclasses import dataclass
from typing import Dict, List, Tuple

import torch
from torch.nn import functional as F

from umc.comm.packet import SparsePacket
from umc.errors import ShapeError
from umc.modules.entropy_cs import SelectionMask


DEFAULT_RADIUS = 7
DEFAULT_LAMBDA = 1.0


@dataclass(frozen=True)
class MaskedGrid:
    r"""
    A scattered feature grid and the cells that were actually observed. Unobserved cells hold
    zeros in every channel.
    """

    grid: torch.Tensor
    mask: SelectionMask

    def __post_init__(self):
        if self.grid.dim() != 3 or tuple(self.grid.shape[1:]) != tuple(self.mask.bits.shape):
            raise ShapeError("Masked grid and mask dimensions disagree.")


def scatter_to_grid(packet: SparsePacket) -> MaskedGrid:
    r"""Materialize a packet as a dense float64 grid, zero outside the transmitted cells."""
    grid = torch.zeros(packet.channels, packet.height, packet.width, dtype=torch.float64)
    bits = torch.zeros(packet.height, packet.width, dtype=torch.bool)
    if packet.count == 0:
        return MaskedGrid(grid, SelectionMask(bits))

    rows = torch.from_numpy(packet.rows).long()
    cols = torch.from_numpy(packet.cols).long()
    if rows.min() < 0 or rows.max() >= packet.height or cols.min() < 0 or cols.max() >= packet.width:
        raise ShapeError("Packet entry lies outside its grid.")
    if packet.values.shape != (packet.count, packet.channels):
        raise ShapeError("Packet values do not match its entry count and channels.")

    grid[:, rows, cols] = torch.from_numpy(packet.values).to(torch.float64).t()
    bits[rows, cols] = True
    return MaskedGrid(grid, SelectionMask(bits))


def _distance_shells(radius: int) -> List[Tuple[int, torch.Tensor]]:
    r"""
    Split the neighbourhood kernel into shells of equal squared distance. Returns
    ``(squared distance, indicator kernel)`` pairs in ascending order, the centre excluded.
    """
    offsets = torch.arange(-radius, radius + 1)
    dy, dx = torch.meshgrid(offsets, offsets, indexing="ij")
    squared = dy ** 2 + dx ** 2
    shells: Dict[int, torch.Tensor] = {}
    for value in sorted(set(squared.flatten().tolist()) - {0}):
        shells[value] = (squared == value).to(torch.float64)
    return list(shells.items())


def rbf_interpolate(
    masked: MaskedGrid,
    radius: int = DEFAULT_RADIUS,
    lam: float = DEFAULT_LAMBDA,
    include_unobserved: bool = True,
) -> torch.Tensor:
    r"""
    Fill unobserved cells of a masked grid, channel by channel.

    An unobserved cell ``p`` becomes ``sum_s W(p, s) f(s) / sum_s W(p, s)`` over cells ``s``
    with ``||s - p||_inf <= radius``, ``s != p``, inside the grid, where
    ``W(p, s) = exp(-lam^2 ||s - p||_2^2)``. Observed cells are returned unchanged.

    Parameters
    ----------
    masked: MaskedGrid
        Scattered grid of shape (channels, height, width) and its observation mask.
    radius: int, optional (default = 7)
        Chebyshev radius of the neighbourhood.
    lam: float, optional (default = 1.0)
        Decay rate of the kernel.
    include_unobserved: bool, optional (default = True)
        Whether unobserved neighbours participate as zeros. If ``False`` only observed
        neighbours contribute, and cells without any observed neighbour stay zero.

    Extended Summary
    ----------------
    The sums are evaluated shell by shell (cells at equal distance) relative to the nearest
    participating shell of every cell. This is algebraically the plain weighted average, and
    stays finite for large ``lam`` where ``exp(-lam^2 d^2)`` underflows for every neighbour.
    """
    if radius < 1:
        raise ShapeError(f"Interpolation radius must be at least 1, found {radius}.")
    grid, mask = masked.grid, masked.mask
    if mask.count == mask.bits.numel():
        return grid.clone()

    channels, height, width = grid.shape
    observed = mask.bits.to(torch.float64).view(1, 1, height, width)
    participants = torch.ones_like(observed) if include_unobserved else observed

    lam_squared = float(lam) ** 2
    shells = _distance_shells(radius)

    # Per shell sums of participants and of values, each of shape (1 or C, height, width).
    shell_counts, shell_values = [], []
    for _, indicator in shells:
        kernel = indicator.view(1, 1, *indicator.shape)
        shell_counts.append(F.conv2d(participants, kernel, padding=radius)[0])
        shell_values.append(
            F.conv2d(
                grid.view(channels, 1, height, width), kernel, padding=radius
            ).view(channels, height, width)
        )

    # Squared distance of the nearest participating shell, per cell.
    nearest = torch.full((1, height, width), float("inf"), dtype=torch.float64)
    for (squared, _), count in zip(shells, shell_counts):
        nearest = torch.where((count > 0) & torch.isinf(nearest), float(squared), nearest)

    numerator = torch.zeros_like(grid)
    denominator = torch.zeros(1, height, width, dtype=torch.float64)
    reachable = torch.isfinite(nearest)
    relative = torch.where(reachable, nearest, torch.zeros_like(nearest))
    for (squared, _), count, values in zip(shells, shell_counts, shell_values):
        # Shells nearer than the nearest participant hold no participants.
        active = reachable & (squared >= relative)
        weight = torch.exp(-lam_squared * (squared - relative).clamp(min=0.0))
        weight = torch.where(active, weight, torch.zeros_like(weight))
        numerator = numerator + weight * values
        denominator = denominator + weight * count

    safe = torch.where(denominator > 0, denominator, torch.ones_like(denominator))
    interpolated = torch.where(denominator > 0, numerator / safe, torch.zeros_like(numerator))
    return torch.where(mask.bits.unsqueeze(0), grid, interpolated)
