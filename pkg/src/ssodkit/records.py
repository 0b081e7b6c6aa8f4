"""Wire formats: newline-delimited JSON detection records in and out.

Each input line is one detection: ``image_id`` (string), ``bbox`` as
``[x_min, y_min, x_max, y_max]`` in absolute pixels, ``image_width`` /
``image_height`` for normalization, ``score`` in [0, 1], and an integer
``category_id``. Records group by image_id in first-seen order, preserving
within-image order. Strict mode aborts on the first bad record; lenient
mode skips and counts them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box, Detection
from .mining import PseudoLabel

__all__ = [
    "RecordError",
    "IngestResult",
    "ingest_predictions",
    "ingest_ground_truth",
    "emit_pseudo_labels",
]

_REQUIRED = ("image_id", "bbox", "image_width", "image_height", "score", "category_id")


class RecordError(ValueError):
    """A malformed input record; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class ImageMeta:
    width: float
    height: float


@dataclass
class IngestResult:
    """Grouped detections plus bookkeeping; kept + skipped == records seen."""

    groups: dict[str, list[Detection]]
    meta: dict[str, ImageMeta]
    kept: int
    skipped: int
    errors: list[str] = field(default_factory=list)
    num_classes: int = 0


def _parse_record(line_no: int, line: str, require_score: bool) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RecordError(line_no, f"invalid JSON ({exc.msg})") from exc
    if not isinstance(rec, dict):
        raise RecordError(line_no, "record must be a JSON object")
    required = _REQUIRED if require_score else tuple(f for f in _REQUIRED if f != "score")
    for name in required:
        if name not in rec:
            raise RecordError(line_no, f"missing field {name!r}")
    bbox = rec["bbox"]
    if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
        raise RecordError(line_no, "bbox must be [x_min, y_min, x_max, y_max]")
    numbers = list(bbox) + [rec["image_width"], rec["image_height"]]
    if require_score or "score" in rec:
        numbers.append(rec["score"])
    for value in numbers:
        if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
            raise RecordError(line_no, f"non-finite or non-numeric value {value!r}")
    if bbox[2] < bbox[0] or bbox[3] < bbox[1]:
        raise RecordError(line_no, f"inverted bbox {bbox}")
    if rec["image_width"] <= 0 or rec["image_height"] <= 0:
        raise RecordError(line_no, "image dimensions must be positive")
    score = rec.get("score", 1.0)
    if not 0.0 <= score <= 1.0:
        raise RecordError(line_no, f"score {score} outside [0, 1]")
    if not isinstance(rec["category_id"], int) or rec["category_id"] < 0:
        raise RecordError(line_no, f"category_id must be a non-negative integer")
    if not isinstance(rec["image_id"], str) or not rec["image_id"]:
        raise RecordError(line_no, "image_id must be a non-empty string")
    return rec


def _normalized_box(rec: dict) -> Box:
    w, h = float(rec["image_width"]), float(rec["image_height"])
    x0 = min(max(rec["bbox"][0] / w, 0.0), 1.0)
    y0 = min(max(rec["bbox"][1] / h, 0.0), 1.0)
    x1 = min(max(rec["bbox"][2] / w, x0), 1.0)
    y1 = min(max(rec["bbox"][3] / h, y0), 1.0)
    return Box(x0, y0, x1, y1)


def _ingest(path: str | Path, strict: bool, require_score: bool) -> IngestResult:
    raw: list[tuple[str, dict]] = []
    skipped = 0
    errors: list[str] = []
    max_category = 0
    with open(path) as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                rec = _parse_record(line_no, line, require_score)
            except RecordError as exc:
                if strict:
                    raise
                skipped += 1
                errors.append(str(exc))
                continue
            raw.append((rec["image_id"], rec))
            max_category = max(max_category, rec["category_id"])

    num_classes = max_category + 1
    groups: dict[str, list[Detection]] = {}
    meta: dict[str, ImageMeta] = {}
    for image_id, rec in raw:
        scores = np.zeros(num_classes)
        scores[rec["category_id"]] = rec.get("score", 1.0)
        det = Detection(_normalized_box(rec), scores)
        groups.setdefault(image_id, []).append(det)
        meta.setdefault(image_id, ImageMeta(float(rec["image_width"]), float(rec["image_height"])))
    return IngestResult(groups, meta, len(raw), skipped, errors, num_classes)


def ingest_predictions(path: str | Path, strict: bool = True) -> IngestResult:
    """Read detector outputs grouped per image, validating every record."""
    return _ingest(path, strict, require_score=True)


def ingest_ground_truth(path: str | Path, strict: bool = True) -> IngestResult:
    """Read ground-truth boxes (same wire format, ``score`` optional)."""
    return _ingest(path, strict, require_score=False)


def emit_pseudo_labels(
    kept: dict[str, list[PseudoLabel]],
    meta: dict[str, ImageMeta],
    path: str | Path,
) -> Path:
    """Write kept pseudo labels back out in the absolute-pixel wire format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for image_id, labels in kept.items():
        m = meta[image_id]
        for label in labels:
            rec = {
                "image_id": image_id,
                "bbox": [
                    round(label.box.x_min * m.width, 6),
                    round(label.box.y_min * m.height, 6),
                    round(label.box.x_max * m.width, 6),
                    round(label.box.y_max * m.height, 6),
                ],
                "image_width": m.width,
                "image_height": m.height,
                "score": round(label.confidence, 6),
                "category_id": label.class_id,
            }
            if label.match_cost is not None:
                rec["match_cost"] = round(label.match_cost, 6)
            lines.append(json.dumps(rec, sort_keys=True))
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path
