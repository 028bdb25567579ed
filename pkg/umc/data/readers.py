r"""
A Reader simply reads records from disk and returns them almost as is. Readers never evaluate
anything, they only turn JSONL lines into the value types of :mod:`umc.modules.geometry` and
:mod:`umc.utils.metrics`.

Each reader implements three methods:

    - ``__len__`` to return the number of records.
    - ``__getitem__`` to return the record of a ``(frame, agent)`` key.
    - ``keys`` to return the sorted list of keys this reader can provide.

Any malformed line raises :class:`~umc.errors.ParseError` naming the file and line number.
"""
import json
from typing import Any, Dict, Iterator, List, Tuple

from umc.errors import ParseError
from umc.modules.geometry import BevBox
from umc.utils.metrics import GtObject, ObjectType, Prediction


FrameKey = Tuple[int, int]


def _jsonl_records(path: str) -> Iterator[Tuple[int, Dict[str, Any]]]:
    with open(path, "r") as jsonl_file:
        for line_number, line in enumerate(jsonl_file, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as error:
                raise ParseError(path, line_number, f"invalid JSON ({error.msg})")
            if not isinstance(record, dict):
                raise ParseError(path, line_number, "record is not a JSON object")
            yield line_number, record


def _frame_key(path: str, line_number: int, record: Dict[str, Any]) -> FrameKey:
    try:
        return int(record["frame"]), int(record.get("agent", 0))
    except (KeyError, TypeError, ValueError):
        raise ParseError(path, line_number, "record needs an integer 'frame' (and 'agent')")


def _box(path: str, line_number: int, values: Any) -> BevBox:
    try:
        cx, cy, w, h = (float(value) for value in values)
        return BevBox(cx, cy, w, h)
    except (TypeError, ValueError) as error:
        raise ParseError(path, line_number, f"invalid box {values!r}: {error}")


class DetectionsReader(object):
    r"""
    A Reader for detection dumps, one JSON object per line::

        {"frame": 3, "agent": 1, "boxes": [[cx, cy, w, h, score], ...]}

    Parameters
    ----------
    jsonl_path: str
        Path to a detections JSONL file.
    """

    def __init__(self, jsonl_path: str):
        self._records: Dict[FrameKey, List[Prediction]] = {}
        for line_number, record in _jsonl_records(jsonl_path):
            key = _frame_key(jsonl_path, line_number, record)
            if key in self._records:
                raise ParseError(jsonl_path, line_number, f"duplicate record for {key}")

            boxes = record.get("boxes", [])
            if not isinstance(boxes, list):
                raise ParseError(jsonl_path, line_number, "'boxes' must be a list")
            predictions: List[Prediction] = []
            for values in boxes:
                if not isinstance(values, list) or len(values) != 5:
                    raise ParseError(jsonl_path, line_number, f"box {values!r} needs 5 numbers")
                box = _box(jsonl_path, line_number, values[:4])
                try:
                    score = float(values[4])
                except (TypeError, ValueError):
                    raise ParseError(jsonl_path, line_number, f"invalid score {values[4]!r}")
                predictions.append((box, score))
            self._records[key] = predictions

    def __len__(self):
        return len(self._records)

    def __getitem__(self, key: FrameKey) -> List[Prediction]:
        return self._records.get(key, [])

    def keys(self) -> List[FrameKey]:
        return sorted(self._records)


class GroundTruthReader(object):
    r"""
    A Reader for typed ground truth, one JSON object per line::

        {"frame": 3, "agent": 1, "objects": [
            {"box": [cx, cy, w, h], "points_sv": 10, "points_cv": 12, "label": "ARTC"}, ...]}

    ``agent`` defaults to 0 and ``label`` is optional (``"ARCI"`` or ``"ARTC"``).

    Parameters
    ----------
    jsonl_path: str
        Path to a ground-truth JSONL file.
    """

    def __init__(self, jsonl_path: str):
        self._records: Dict[FrameKey, List[GtObject]] = {}
        for line_number, record in _jsonl_records(jsonl_path):
            key = _frame_key(jsonl_path, line_number, record)
            if key in self._records:
                raise ParseError(jsonl_path, line_number, f"duplicate record for {key}")

            objects = record.get("objects", [])
            if not isinstance(objects, list):
                raise ParseError(jsonl_path, line_number, "'objects' must be a list")
            gts: List[GtObject] = []
            for entry in objects:
                if not isinstance(entry, dict) or "box" not in entry:
                    raise ParseError(jsonl_path, line_number, "every object needs a 'box'")
                box = _box(jsonl_path, line_number, entry["box"])
                try:
                    label = entry.get("label")
                    gts.append(
                        GtObject(
                            box=box,
                            points_single_view=int(entry.get("points_sv", 0)),
                            points_collab_view=int(entry.get("points_cv", 0)),
                            manual_label=ObjectType(label) if label is not None else None,
                        )
                    )
                except (TypeError, ValueError) as error:
                    raise ParseError(jsonl_path, line_number, str(error))
            self._records[key] = gts

    def __len__(self):
        return len(self._records)

    def __getitem__(self, key: FrameKey) -> List[GtObject]:
        return self._records.get(key, [])

    def keys(self) -> List[FrameKey]:
        return sorted(self._records)
