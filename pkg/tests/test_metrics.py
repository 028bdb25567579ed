import pytest

from umc.modules.geometry import BevBox
from umc.utils.metrics import (
    EvalFrame,
    GtObject,
    MetricRow,
    ObjectType,
    average_precision,
    classify_object,
    evaluate_frames,
    match_detections,
    recall_by_type,
    typed_frame,
)


def _box(cx: float, cy: float = 0.0) -> BevBox:
    return BevBox(cx, cy, 2.0, 2.0)


@pytest.mark.parametrize(
    "points_sv,points_cv,label,expected",
    [
        (5, 5, None, ObjectType.ARSV),
        (5, 9, ObjectType.ARTC, ObjectType.ARSV),
        (4, 5, None, ObjectType.ARCV),
        (0, 9, ObjectType.ARCI, ObjectType.ARCV),
        (4, 4, None, ObjectType.ARCI),
        (0, 0, ObjectType.ARTC, ObjectType.ARTC),
        (2, 3, ObjectType.ARCI, ObjectType.ARCI),
    ],
)
def test_classify_object(points_sv, points_cv, label, expected):
    gt = GtObject(_box(0.0), points_sv, points_cv, label)
    assert classify_object(gt, tau=4) == expected


def test_classify_object_threshold_is_configurable():
    gt = GtObject(_box(0.0), 1, 1)
    assert classify_object(gt, tau=0) == ObjectType.ARSV
    assert classify_object(gt, tau=1) == ObjectType.ARCI


def test_gt_object_validation():
    with pytest.raises(ValueError):
        GtObject(_box(0.0), 5, 4)
    with pytest.raises(ValueError):
        GtObject(_box(0.0), -1, 0)
    with pytest.raises(ValueError):
        GtObject(_box(0.0), 0, 0, ObjectType.ARSV)


def test_match_detections_is_greedy_by_score():
    gts = [_box(0.0), _box(0.5)]
    # The higher scored prediction takes the ground truth it overlaps best.
    preds = [(_box(0.4), 0.6), (_box(0.5), 0.9)]
    assignment = match_detections(preds, gts, 0.3)
    assert assignment.pred_to_gt == [0, 1]
    assert assignment.gt_matched == [True, True]

    assignment = match_detections([(_box(10.0), 0.9)], gts, 0.5)
    assert assignment.pred_to_gt == [None]
    assert assignment.gt_matched == [False, False]


def test_match_detections_is_one_to_one():
    assignment = match_detections([(_box(0.0), 0.9), (_box(0.0), 0.8)], [_box(0.0)], 0.5)
    assert assignment.pred_to_gt == [0, None]


def test_average_precision_fixture():
    frame = EvalFrame(
        preds=[(_box(0.0), 0.9), (_box(20.0), 0.8), (_box(10.0), 0.7)],
        gts=[(_box(0.0), ObjectType.ARSV), (_box(10.0), ObjectType.ARCV)],
    )
    assert average_precision([frame], 0.5) == pytest.approx(5 / 6, abs=1e-12)


def test_average_precision_pools_frames_by_score():
    first = EvalFrame([(_box(0.0), 0.9)], [(_box(0.0), ObjectType.ARSV)])
    second = EvalFrame([(_box(20.0), 0.8), (_box(10.0), 0.7)], [(_box(10.0), ObjectType.ARSV)])
    assert average_precision([first, second], 0.5) == pytest.approx(5 / 6, abs=1e-12)


def test_average_precision_edge_cases():
    perfect = EvalFrame([(_box(0.0), 0.9)], [(_box(0.0), ObjectType.ARSV)])
    assert average_precision([perfect], 0.5) == 1.0
    assert average_precision([EvalFrame([], [(_box(0.0), ObjectType.ARSV)])], 0.5) == 0.0
    assert average_precision([EvalFrame([(_box(0.0), 0.9)], [])], 0.5) == 0.0
    assert average_precision([], 0.5) == 0.0


def test_average_precision_warns_without_ground_truth(caplog):
    with caplog.at_level("WARNING", logger="umc.utils.metrics"):
        assert average_precision([EvalFrame([(_box(0.0), 0.9)], [])], 0.5) == 0.0
    assert "No ground truth in 1 frames" in caplog.text


def test_recall_by_type_omits_absent_types():
    frame = EvalFrame(
        preds=[(_box(0.0), 0.9)],
        gts=[
            (_box(0.0), ObjectType.ARSV),
            (_box(10.0), ObjectType.ARSV),
            (_box(20.0), ObjectType.ARCI),
        ],
    )
    assert recall_by_type([frame], 0.5) == {ObjectType.ARSV: 0.5, ObjectType.ARCI: 0.0}


def test_typed_frame_and_evaluate_frames():
    frame = typed_frame(
        [(_box(0.0), 0.9)],
        [GtObject(_box(0.0), 9, 9), GtObject(_box(10.0), 0, 6)],
        tau=4,
    )
    assert [object_type for _, object_type in frame.gts] == [ObjectType.ARSV, ObjectType.ARCV]

    rows = evaluate_frames([frame], [0.5, 0.7], tau=4)
    assert rows[:3] == [
        MetricRow("AP", 0.5, 0.5, 4),
        MetricRow("ARSV", 0.5, 1.0, 4),
        MetricRow("ARCV", 0.5, 0.0, 4),
    ]
    assert [row.iou for row in rows] == [0.5] * 3 + [0.7] * 3
