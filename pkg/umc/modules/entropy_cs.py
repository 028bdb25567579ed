r"""
Entropy-based communication selection.

Every agent compresses its features into a single-channel query matrix. A collaborator first
keeps the cells of its own query with the highest local entropy (self selection), then, among
those, the cells where its query differs most from the ego's broadcast query (cross selection).
Only the surviving cells are gathered into a :class:`~umc.comm.packet.SparsePacket`.
"""
import logging
import math
from typing import NamedTuple, Optional

import torch
from torch.nn import functional as F

from umc.comm.packet import SparsePacket
from umc.errors import ConfigError, ShapeError, SkipSignal
from umc.modules import functional as UF
from umc.utils.checkpointing import ParamSet


logger: logging.Logger = logging.getLogger(__name__)

SELECTION_MODES = ("topk", "mean")
INDEX_BASES = ("candidates", "grid")


class SelectionMask(object):
    r"""
    Cells chosen for transmission, a boolean (height, width) map with a cached popcount.

    Parameters
    ----------
    bits: torch.Tensor
        Boolean tensor of shape (height, width).
    """

    def __init__(self, bits: torch.Tensor):
        if bits.dim() != 2:
            raise ShapeError(f"Selection mask must be (H, W), found {tuple(bits.shape)}.")
        self.bits = bits.to(torch.bool).clone()
        self.count = int(self.bits.sum())

    @classmethod
    def full(cls, height: int, width: int) -> "SelectionMask":
        return cls(torch.ones(height, width, dtype=torch.bool))

    @classmethod
    def empty(cls, height: int, width: int) -> "SelectionMask":
        return cls(torch.zeros(height, width, dtype=torch.bool))

    @property
    def height(self) -> int:
        return self.bits.size(0)

    @property
    def width(self) -> int:
        return self.bits.size(1)

    @property
    def fraction(self) -> float:
        return self.count / self.bits.numel()

    def issubset(self, other: "SelectionMask") -> bool:
        return bool((self.bits & ~other.bits).sum() == 0)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SelectionMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(torch.equal(self.bits, other.bits))

    def __repr__(self) -> str:
        return f"SelectionMask({self.height}x{self.width}, count={self.count})"


class SelectionResult(NamedTuple):
    r"""Outcome of both selection stages for one collaborator, level and timestep."""

    self_mask: SelectionMask
    mask: SelectionMask
    skipped: bool


def _check_delta(delta: float, name: str = "delta"):
    if not 0.0 < delta <= 1.0:
        raise ConfigError(f"{name} must lie in (0, 1], found {delta}.")


def _check_query(query: torch.Tensor, name: str):
    if query.dim() != 2 or min(query.shape) < 1:
        raise ShapeError(f"{name} must be a non-empty (H, W) query matrix.")


def make_query(feature: torch.Tensor, params: ParamSet) -> torch.Tensor:
    r"""
    Compress a feature grid to a non-negative (height, width) query matrix with two 1x1
    convolutions, each followed by a ReLU.

    Parameters
    ----------
    feature: torch.Tensor
        Feature grid of shape (channels, height, width).
    params: ParamSet
        Scoped parameters holding ``conv1.weight`` (hidden, channels, 1, 1) and
        ``conv2.weight`` (1, hidden, 1, 1). Biases ``conv1.bias`` and ``conv2.bias`` are used
        when present.
    """
    UF.check_grid(feature, "feature")
    hidden = UF.relu(
        UF.conv2d(feature, params["conv1.weight"], params.get("conv1.bias"))
    )
    query = UF.relu(UF.conv2d(hidden, params["conv2.weight"], params.get("conv2.bias")))
    if query.size(0) != 1:
        raise ShapeError(f"Query generator must output one channel, found {query.size(0)}.")
    return query[0]


def local_entropy(
    k: torch.Tensor, q: torch.Tensor, window_m: int = 3, window_n: int = 3
) -> torch.Tensor:
    r"""
    Entropy estimate of every cell of ``q`` against its neighbourhood in ``k``.

    ``p(m, n) = mean over the window of sigmoid(k(m + i, n + j) - q(m, n))`` with ``k`` zero
    padded, and the output is ``p * ln(p)``, so every entry lies in ``[-1/e, 0]``.

    Parameters
    ----------
    k: torch.Tensor
        Neighbour query matrix of shape (height, width).
    q: torch.Tensor
        Centre query matrix of the same shape.
    window_m: int, optional (default = 3)
    window_n: int, optional (default = 3)
        Odd window height and width.
    """
    _check_query(k, "k")
    _check_query(q, "q")
    if k.shape != q.shape:
        raise ShapeError(f"Query shapes disagree: {tuple(k.shape)} vs {tuple(q.shape)}.")
    if window_m < 1 or window_n < 1 or window_m % 2 == 0 or window_n % 2 == 0:
        raise ShapeError(f"Entropy windows must be odd, found {window_m}x{window_n}.")

    height, width = q.shape
    # shape: (1, window_m * window_n, height * width)
    neighbours = F.unfold(
        k.view(1, 1, height, width),
        kernel_size=(window_m, window_n),
        padding=(window_m // 2, window_n // 2),
    )
    centre = q.reshape(1, 1, height * width)
    p = torch.sigmoid(neighbours - centre).mean(dim=1).view(height, width)
    # p underflows to 0 for large query gaps, xlogy keeps 0 * log(0) at 0.
    return torch.special.xlogy(p, p)


def _threshold(values: torch.Tensor, delta: float, mode: str, index_base: int) -> float:
    if mode == "mean":
        return float(values.mean())
    ordered = torch.sort(values, descending=True).values
    index = min(math.floor(index_base * delta + 1e-9), values.numel() - 1)
    return float(ordered[index])


def threshold_topk(
    entropy: torch.Tensor, delta: float, mode: str = "topk"
) -> SelectionMask:
    r"""
    Keep the top ``delta`` fraction of cells. The threshold is the value at index
    ``min(floor(H * W * delta), H * W - 1)`` of the descending sort, and every cell with a value
    greater than or equal to it is kept, so ties may select more cells.

    With ``mode="mean"`` the threshold is the mean of the map and ``delta`` is ignored.
    """
    if mode not in SELECTION_MODES:
        raise ConfigError(f"Unknown selection mode {mode}, expected one of {SELECTION_MODES}.")
    if mode == "topk":
        _check_delta(delta)
    _check_query(entropy, "entropy")
    threshold = _threshold(entropy.reshape(-1), delta, mode, entropy.numel())
    return SelectionMask(entropy >= threshold)


def self_select(m_k: torch.Tensor, delta_s: float, mode: str = "topk") -> SelectionMask:
    r"""Cells of a collaborator's own query with the highest self entropy."""
    return threshold_topk(local_entropy(m_k, m_k), delta_s, mode=mode)


def cross_select(
    m_i: torch.Tensor,
    m_k: torch.Tensor,
    self_mask: SelectionMask,
    delta_c: float,
    mode: str = "topk",
    index_base: str = "candidates",
) -> SelectionMask:
    r"""
    Narrow a collaborator's self selection down to the cells most informative for the ego.

    Parameters
    ----------
    m_i: torch.Tensor
        The ego query, already aligned to the collaborator's frame.
    m_k: torch.Tensor
        The collaborator query.
    self_mask: SelectionMask
        Result of :func:`self_select` for ``m_k``.
    delta_c: float
        Keep fraction in (0, 1].
    mode: str, optional (default = "topk")
        ``"topk"`` or ``"mean"``.
    index_base: str, optional (default = "candidates")
        Population the threshold index is a fraction of. ``"candidates"`` uses the number of
        self-selected cells, ``"grid"`` uses ``H * W`` (clamped to the candidate count).

    Returns
    -------
    SelectionMask
        A subset of ``self_mask``.

    Raises
    ------
    umc.errors.SkipSignal
        If ``self_mask`` is empty.
    """
    if mode not in SELECTION_MODES:
        raise ConfigError(f"Unknown selection mode {mode}, expected one of {SELECTION_MODES}.")
    if index_base not in INDEX_BASES:
        raise ConfigError(f"Unknown index base {index_base}, expected one of {INDEX_BASES}.")
    if mode == "topk":
        _check_delta(delta_c, "delta_c")
    if tuple(self_mask.bits.shape) != tuple(m_k.shape):
        raise ShapeError("Self mask and query dimensions disagree.")
    if self_mask.count == 0:
        raise SkipSignal("Self selection is empty, cross selection is closed.")

    entropy = local_entropy(m_i, m_k)
    candidates = entropy[self_mask.bits]
    base = candidates.numel() if index_base == "candidates" else entropy.numel()
    threshold = _threshold(candidates, delta_c, mode, base)
    return SelectionMask(self_mask.bits & (entropy >= threshold))


def should_skip(mask: SelectionMask, min_cells: int) -> bool:
    r"""Whether a self selection is too small to be worth a cross-select stage."""
    return mask.count < min_cells


def select_regions(
    m_i: torch.Tensor,
    m_k: torch.Tensor,
    delta_s: float,
    delta_c: float,
    min_cells: int = 1,
    mode: str = "topk",
    index_base: str = "candidates",
) -> SelectionResult:
    r"""
    Run self selection, the skip rule and cross selection for one collaborator. A skipped
    collaborator gets an empty mask and transmits nothing.
    """
    self_mask = self_select(m_k, delta_s, mode=mode)
    if should_skip(self_mask, min_cells):
        logger.debug(f"Self selection kept {self_mask.count} < {min_cells} cells, skipping.")
        return SelectionResult(self_mask, SelectionMask.empty(*m_k.shape), True)
    try:
        mask = cross_select(m_i, m_k, self_mask, delta_c, mode=mode, index_base=index_base)
    except SkipSignal:
        logger.debug("Cross selection closed on an empty candidate set.")
        return SelectionResult(self_mask, SelectionMask.empty(*m_k.shape), True)
    return SelectionResult(self_mask, mask, False)


def gather_sparse(
    feature: torch.Tensor,
    mask: SelectionMask,
    sender_id: int = 0,
    receiver_id: int = 0,
    timestep: int = 0,
    level: int = 0,
) -> SparsePacket:
    r"""
    Collect the masked cells of a feature grid into a packet, scanning rows first.

    Parameters
    ----------
    feature: torch.Tensor
        Feature grid of shape (channels, height, width).
    mask: SelectionMask
        Cells to transmit, with the feature's spatial dimensions.
    """
    channels, height, width = feature.shape
    if (mask.height, mask.width) != (height, width):
        raise ShapeError(
            f"Mask {mask.height}x{mask.width} does not match feature {height}x{width}."
        )
    # shape: (count, 2), lexicographic, i.e. row-major
    cells = torch.nonzero(mask.bits, as_tuple=False)
    rows, cols = cells[:, 0], cells[:, 1]
    # shape: (count, channels)
    values = feature[:, rows, cols].t()
    return SparsePacket(
        sender_id=sender_id,
        receiver_id=receiver_id,
        timestep=timestep,
        level=level,
        height=height,
        width=width,
        channels=channels,
        rows=rows.numpy(),
        cols=cols.numpy(),
        values=values.numpy().astype("float32"),
    )
