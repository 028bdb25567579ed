r"""
Writers for the files of a run directory. Output is deterministic: keys are sorted and records
are written in ``(frame, agent)`` order, so identical runs produce identical bytes.
"""
import csv
import json
from typing import Any, Dict, Iterable, List, Sequence, Tuple

from umc.utils.metrics import GtObject, MetricRow, Prediction


def _box_list(box) -> List[float]:
    return [box.cx, box.cy, box.w, box.h]


def write_detections_jsonl(
    path: str, detections: Iterable[Tuple[Tuple[int, int], Sequence[Prediction]]]
):
    r"""Write ``{frame, agent, boxes: [[cx, cy, w, h, score], ...]}`` per line."""
    with open(path, "w") as jsonl_file:
        for (frame, agent), predictions in sorted(detections, key=lambda item: item[0]):
            record = {
                "frame": frame,
                "agent": agent,
                "boxes": [_box_list(box) + [score] for box, score in predictions],
            }
            jsonl_file.write(json.dumps(record, sort_keys=True) + "\n")


def write_ground_truth_jsonl(
    path: str, ground_truth: Iterable[Tuple[Tuple[int, int], Sequence[GtObject]]]
):
    r"""Write typed ground truth in the format :class:`~umc.data.readers.GroundTruthReader` reads."""
    with open(path, "w") as jsonl_file:
        for (frame, agent), objects in sorted(ground_truth, key=lambda item: item[0]):
            entries = []
            for gt in objects:
                entry: Dict[str, Any] = {
                    "box": _box_list(gt.box),
                    "points_sv": gt.points_single_view,
                    "points_cv": gt.points_collab_view,
                }
                if gt.manual_label is not None:
                    entry["label"] = gt.manual_label.value
                entries.append(entry)
            record = {"frame": frame, "agent": agent, "objects": entries}
            jsonl_file.write(json.dumps(record, sort_keys=True) + "\n")


def write_metrics_csv(path: str, rows: Sequence[MetricRow]):
    r"""
    Write ``metric,iou,value`` rows. A leading ``tau`` column is added when the rows span more
    than one visibility threshold.
    """
    with_tau = len({row.tau for row in rows}) > 1
    with open(path, "w", newline="") as csv_file:
        writer = csv.writer(csv_file)
        writer.writerow((["tau"] if with_tau else []) + ["metric", "iou", "value"])
        for row in rows:
            values = [row.metric, row.iou, repr(float(row.value))]
            writer.writerow(([row.tau] if with_tau else []) + values)


def write_table_csv(path: str, fields: Sequence[str], records: Sequence[Dict[str, Any]]):
    with open(path, "w", newline="") as csv_file:
        writer = csv.DictWriter(csv_file, fieldnames=list(fields))
        writer.writeheader()
        for record in records:
            writer.writerow(record)


def write_json(path: str, payload: Dict[str, Any]):
    with open(path, "w") as json_file:
        json.dump(payload, json_file, indent=2, sort_keys=True)
        json_file.write("\n")
