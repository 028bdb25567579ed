r"""
Multi-grain feature enhancement and the detection head.

Collaborative maps guide the reconstruction of the ego features from the coarsest to the
finest level of the resolution ladder. The finest enhanced map feeds two convolutional
branches, one scoring every cell as foreground and one regressing a box relative to the cell.
"""
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import torch

from umc.errors import ShapeError
from umc.modules import functional as UF
from umc.modules.geometry import BevBox, cell_centers, iou
from umc.utils.checkpointing import ParamSet


# Log-size regressions are clamped so decoded boxes stay positive and finite.
LOG_SIZE_LIMIT = 8.0


def stage_one(e: torch.Tensor, f: torch.Tensor, params: ParamSet) -> torch.Tensor:
    r"""
    Guide an ego feature with a collaborative map. The guidance is
    ``channel_max(sigmoid(conv1x1(e) + b))``, a single-channel map in (0, 1) which is multiplied
    into every channel of ``f``.

    Parameters
    ----------
    e: torch.Tensor
        Collaborative map of shape (C, H, W).
    f: torch.Tensor
        Ego feature of the same shape.
    params: ParamSet
        Level MGFE parameters holding ``guide.weight`` (C, C, 1, 1) and ``guide.bias`` (C, ).
    """
    if e.shape != f.shape:
        raise ShapeError(f"Guidance shapes disagree: {tuple(e.shape)} vs {tuple(f.shape)}.")
    guidance = UF.channel_max(UF.sigmoid(UF.conv2d(e, params["guide.weight"], params["guide.bias"])))
    return guidance * f


def stage_two(
    f_coarse: torch.Tensor, f1: torch.Tensor, e: torch.Tensor, params: ParamSet
) -> torch.Tensor:
    r"""
    Fuse the enhanced coarser level with the guided feature and the collaborative map of this
    level: the three operands are L2 normalized per pixel, concatenated along channels and
    passed through ``sigmoid(conv3x3 + b)``.

    Parameters
    ----------
    f_coarse: torch.Tensor
        Enhanced feature of the previous (coarser) level, half the spatial size of ``f1``.
    f1: torch.Tensor
        Output of :func:`stage_one` at this level.
    e: torch.Tensor
        Collaborative map of this level.
    params: ParamSet
        Level MGFE parameters holding ``fuse.weight``, ``fuse.bias`` and the scales
        ``norm_coarse``, ``norm_guided``, ``norm_collab``.

    Returns
    -------
    torch.Tensor
        Feature with ``fuse.weight.size(0)`` channels at the spatial size of ``f1``.
    """
    upsampled = UF.upsample2x(f_coarse)
    if upsampled.shape[1:] != f1.shape[1:] or e.shape != f1.shape:
        raise ShapeError(
            f"Ladder mismatch: upsampled coarse {tuple(upsampled.shape)}, guided "
            f"{tuple(f1.shape)}, collaborative {tuple(e.shape)}."
        )
    fused = torch.cat(
        [
            UF.l2norm_channels(upsampled, params["norm_coarse"]),
            UF.l2norm_channels(f1, params["norm_guided"]),
            UF.l2norm_channels(e, params["norm_collab"]),
        ],
        dim=0,
    )
    return UF.sigmoid(UF.conv2d(fused, params["fuse.weight"], params["fuse.bias"], padding=1))


def mgfe_forward(
    ego_feats: Sequence[torch.Tensor], collab_maps: Sequence[torch.Tensor], params: ParamSet
) -> torch.Tensor:
    r"""
    Enhance the ego features coarse to fine. Parameters of level ``j`` are looked up under
    ``level<j>.mgfe``.

    Returns
    -------
    torch.Tensor
        The enhanced map of the finest level.
    """
    if len(ego_feats) != len(collab_maps) or len(ego_feats) == 0:
        raise ShapeError("Ego features and collaborative maps must cover the same levels.")

    enhanced = stage_one(collab_maps[0], ego_feats[0], params.scope("level0.mgfe"))
    for level in range(1, len(ego_feats)):
        level_params = params.scope(f"level{level}.mgfe")
        guided = stage_one(collab_maps[level], ego_feats[level], level_params)
        enhanced = stage_two(enhanced, guided, collab_maps[level], level_params)
    return enhanced


@dataclass
class DetectionOutput:
    r"""
    Dense head outputs and the decoded boxes.

    Parameters
    ----------
    score_map: torch.Tensor
        Foreground probability of every cell, shape (1, H, W).
    box_map: torch.Tensor
        Raw ``(dx, dy, tw, th)`` regression of every cell, shape (4, H, W).
    decoded: List[Tuple[BevBox, float]]
        Boxes surviving the score threshold and NMS, by descending score.
    """

    score_map: torch.Tensor
    box_map: torch.Tensor
    decoded: List[Tuple[BevBox, float]] = field(default_factory=list)


def non_maximum_suppression(
    candidates: Sequence[Tuple[BevBox, float]], iou_threshold: float
) -> List[Tuple[BevBox, float]]:
    r"""Greedy NMS, ``candidates`` must already be sorted by descending score."""
    keep: List[Tuple[BevBox, float]] = []
    for box, score in candidates:
        if all(iou(box, kept) <= iou_threshold for kept, _ in keep):
            keep.append((box, score))
    return keep


def detect_head(
    d: torch.Tensor,
    params: ParamSet,
    score_threshold: float = 0.5,
    nms_iou: float = 0.5,
    cell_size: float = 1.0,
) -> DetectionOutput:
    r"""
    Score and regress every cell of the enhanced map, then decode boxes.

    A cell with score at least ``score_threshold`` yields a box centred at the cell's metric
    centre plus ``(dx, dy) * cell_size``, with size ``(exp(tw), exp(th))`` meters.

    Parameters
    ----------
    d: torch.Tensor
        Enhanced map of shape (C, H, W).
    params: ParamSet
        Head parameters holding ``cls.weight`` (1, C, 3, 3), ``cls.bias``, ``reg.weight``
        (4, C, 3, 3) and ``reg.bias``.
    score_threshold: float, optional (default = 0.5)
    nms_iou: float, optional (default = 0.5)
    cell_size: float, optional (default = 1.0)
        Metric cell size of the map.
    """
    UF.check_grid(d, "enhanced map")
    score_map = UF.sigmoid(UF.conv2d(d, params["cls.weight"], params["cls.bias"], padding=1))
    box_map = UF.conv2d(d, params["reg.weight"], params["reg.bias"], padding=1)
    if score_map.size(0) != 1 or box_map.size(0) != 4:
        raise ShapeError("Detection head must output 1 score and 4 regression channels.")

    _, height, width = d.shape
    center_x, center_y = cell_centers(height, width, cell_size)

    scores = score_map[0].reshape(-1)
    # Stable sort: equal scores keep row-major order.
    order = torch.sort(-scores, stable=True).indices
    candidates: List[Tuple[BevBox, float]] = []
    for index in order.tolist():
        score = float(scores[index])
        if score < score_threshold:
            break
        row, col = divmod(index, width)
        dx, dy, tw, th = box_map[:, row, col].tolist()
        tw = min(max(tw, -LOG_SIZE_LIMIT), LOG_SIZE_LIMIT)
        th = min(max(th, -LOG_SIZE_LIMIT), LOG_SIZE_LIMIT)
        box = BevBox(
            float(center_x[row, col]) + dx * cell_size,
            float(center_y[row, col]) + dy * cell_size,
            math.exp(tw),
            math.exp(th),
        )
        candidates.append((box, score))

    decoded = non_maximum_suppression(candidates, nms_iou)
    return DetectionOutput(score_map=score_map, box_map=box_map, decoded=decoded)
