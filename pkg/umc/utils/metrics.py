r"""
Detection metrics typed by visibility.

Every ground-truth object is put in exactly one bucket according to how many LiDAR points the
ego (single view) and all agents together (collaborative view) received from it:

- ``ARSV``: visible from the ego alone.
- ``ARCV``: visible only through collaboration.
- ``ARCI``: completely invisible.
- ``ARTC``: invisible now, visible at the previous tick (labelled, never inferred from counts).

Recall is reported per bucket. Matching ignores buckets, they only split the denominators.
"""
import enum
import logging
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from umc.modules.geometry import BevBox, iou


logger: logging.Logger = logging.getLogger(__name__)


class ObjectType(enum.Enum):
    ARSV = "ARSV"
    ARCV = "ARCV"
    ARCI = "ARCI"
    ARTC = "ARTC"


@dataclass(frozen=True)
class GtObject:
    r"""
    A ground-truth object seen from one ego agent.

    Parameters
    ----------
    box: BevBox
        Box in the ego frame.
    points_single_view: int
        LiDAR points the ego received from the object.
    points_collab_view: int
        Points received by all agents together, at least ``points_single_view``.
    manual_label: ObjectType, optional (default = None)
        ``ARCI`` or ``ARTC``, only consulted when the object is invisible in both views.
    """

    box: BevBox
    points_single_view: int = 0
    points_collab_view: int = 0
    manual_label: Optional[ObjectType] = None

    def __post_init__(self):
        if self.points_single_view < 0 or self.points_collab_view < self.points_single_view:
            raise ValueError(
                f"Need 0 <= points_single_view <= points_collab_view, found "
                f"{self.points_single_view} and {self.points_collab_view}."
            )
        if self.manual_label not in (None, ObjectType.ARCI, ObjectType.ARTC):
            raise ValueError(f"Manual labels must be ARCI or ARTC, found {self.manual_label}.")


def classify_object(gt: GtObject, tau: int = 4) -> ObjectType:
    r"""
    Visibility bucket of an object, thresholds are strict: an object is visible when it
    returned more than ``tau`` points.
    """
    if gt.points_single_view > tau:
        return ObjectType.ARSV
    if gt.points_collab_view > tau:
        return ObjectType.ARCV
    if gt.manual_label is not None:
        return gt.manual_label
    return ObjectType.ARCI


Prediction = Tuple[BevBox, float]


class Assignment(NamedTuple):
    r"""
    Result of matching, indexed like the inputs.

    Parameters
    ----------
    pred_to_gt: List[Optional[int]]
        Matched ground-truth index of every prediction, ``None`` for false positives.
    gt_matched: List[bool]
        Whether every ground truth was matched.
    """

    pred_to_gt: List[Optional[int]]
    gt_matched: List[bool]


def match_detections(
    preds: Sequence[Prediction], gts: Sequence[BevBox], iou_threshold: float
) -> Assignment:
    r"""
    Greedy one-to-one matching. Predictions are visited by descending score (ties keep input
    order), and each takes the unmatched ground truth with the highest IoU, provided that IoU
    is at least ``iou_threshold``.
    """
    order = sorted(range(len(preds)), key=lambda index: -preds[index][1])
    pred_to_gt: List[Optional[int]] = [None] * len(preds)
    gt_matched = [False] * len(gts)
    for pred_index in order:
        box, _ = preds[pred_index]
        best_gt, best_iou = None, iou_threshold
        for gt_index, gt_box in enumerate(gts):
            if gt_matched[gt_index]:
                continue
            overlap = iou(box, gt_box)
            if overlap >= best_iou and (best_gt is None or overlap > best_iou):
                best_gt, best_iou = gt_index, overlap
        if best_gt is not None:
            pred_to_gt[pred_index] = best_gt
            gt_matched[best_gt] = True
    return Assignment(pred_to_gt, gt_matched)


class EvalFrame(NamedTuple):
    r"""Predictions and typed ground truth of one (frame, agent) pair."""

    preds: List[Prediction]
    gts: List[Tuple[BevBox, ObjectType]]


def typed_frame(preds: Sequence[Prediction], gts: Sequence[GtObject], tau: int) -> EvalFrame:
    return EvalFrame(list(preds), [(gt.box, classify_object(gt, tau)) for gt in gts])


def recall_by_type(frames: Sequence[EvalFrame], iou_threshold: float) -> Dict[ObjectType, float]:
    r"""
    Matched over total ground truth per type, pooled over frames. Types without any ground
    truth are absent from the result.
    """
    matched: Dict[ObjectType, int] = {}
    total: Dict[ObjectType, int] = {}
    for frame in frames:
        assignment = match_detections(frame.preds, [box for box, _ in frame.gts], iou_threshold)
        for (_, object_type), is_matched in zip(frame.gts, assignment.gt_matched):
            total[object_type] = total.get(object_type, 0) + 1
            matched[object_type] = matched.get(object_type, 0) + int(is_matched)
    return {
        object_type: matched[object_type] / total[object_type]
        for object_type in ObjectType
        if object_type in total
    }


def average_precision(frames: Sequence[EvalFrame], iou_threshold: float) -> float:
    r"""
    Area under the monotone envelope of the precision-recall curve, predictions of all frames
    pooled and sorted by score. Returns 0.0 when there is no ground truth at all.

    Examples
    --------
    Two ground truths, predictions scored 0.9 (correct), 0.8 (wrong) and 0.7 (correct) give
    ``0.5 * 1 + 0.5 * 2/3 = 5/6``.
    """
    scores: List[float] = []
    hits: List[bool] = []
    num_gts = 0
    for frame in frames:
        assignment = match_detections(frame.preds, [box for box, _ in frame.gts], iou_threshold)
        num_gts += len(frame.gts)
        for (_, score), gt_index in zip(frame.preds, assignment.pred_to_gt):
            scores.append(score)
            hits.append(gt_index is not None)
    if num_gts == 0:
        logger.warning(f"No ground truth in {len(frames)} frames, average precision is 0.")
        return 0.0
    if len(scores) == 0:
        return 0.0

    order = np.argsort(-np.asarray(scores), kind="stable")
    true_positives = np.cumsum(np.asarray(hits, dtype=np.float64)[order])
    false_positives = np.cumsum(1.0 - np.asarray(hits, dtype=np.float64)[order])
    recall = true_positives / num_gts
    precision = true_positives / np.maximum(true_positives + false_positives, np.finfo(np.float64).eps)

    # Append sentinels, then take the monotone (non-increasing) envelope of precision.
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for index in range(mpre.size - 1, 0, -1):
        mpre[index - 1] = np.maximum(mpre[index - 1], mpre[index])

    changes = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


class MetricRow(NamedTuple):
    metric: str
    iou: float
    value: float
    tau: Optional[int] = None


def evaluate_frames(
    frames: Sequence[EvalFrame], iou_thresholds: Sequence[float], tau: Optional[int] = None
) -> List[MetricRow]:
    r"""AP and the per-type recalls present in ``frames``, for every IoU threshold."""
    rows: List[MetricRow] = []
    for iou_threshold in iou_thresholds:
        rows.append(MetricRow("AP", iou_threshold, average_precision(frames, iou_threshold), tau))
        recalls = recall_by_type(frames, iou_threshold)
        for object_type, value in recalls.items():
            rows.append(MetricRow(object_type.value, iou_threshold, value, tau))
    return rows
