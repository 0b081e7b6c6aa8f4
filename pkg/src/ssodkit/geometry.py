"""Bounding-box types and the geometric primitives everything else consumes.

Boxes live in normalized image coordinates: corners inside [0, 1] with
``x_min <= x_max`` and ``y_min <= y_max``. All functions here are pure and
safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Box",
    "Detection",
    "iou",
    "giou",
    "l1_center_form",
    "nms",
    "pairwise_iou",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in corner form (x_min, y_min, x_max, y_max)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not all(np.isfinite([self.x_min, self.y_min, self.x_max, self.y_max])):
            raise ValueError(f"box coordinates must be finite: {self}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box: {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def to_center_form(self) -> tuple[float, float, float, float]:
        """Return (cx, cy, w, h)."""
        cx, cy = self.center
        return cx, cy, self.width, self.height

    @staticmethod
    def from_center_form(cx: float, cy: float, w: float, h: float) -> "Box":
        if w < 0 or h < 0:
            raise ValueError(f"negative extent: w={w}, h={h}")
        return Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


@dataclass
class Detection:
    """One detector output row: a box plus per-class probabilities.

    ``class_id`` and ``score`` are derived from ``scores`` (argmax with
    lowest-index tie-break, and the max probability) unless given explicitly,
    in which case they must agree with the vector.
    """

    box: Box
    scores: np.ndarray
    class_id: int = field(default=-1)
    score: float = field(default=-1.0)

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=float)
        if self.scores.ndim != 1 or self.scores.size == 0:
            raise ValueError("scores must be a non-empty 1-D vector")
        if np.any(~np.isfinite(self.scores)) or np.any(self.scores < 0) or np.any(self.scores > 1):
            raise ValueError("scores entries must be finite probabilities in [0, 1]")
        derived_class = int(np.argmax(self.scores))
        derived_score = float(self.scores[derived_class])
        if self.class_id == -1:
            self.class_id = derived_class
        elif self.class_id != derived_class:
            raise ValueError(
                f"class_id {self.class_id} does not match argmax(scores) {derived_class}"
            )
        if self.score == -1.0:
            self.score = derived_score
        elif self.score != derived_score:
            raise ValueError(f"score {self.score} does not match max(scores) {derived_score}")


def _intersection_area(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    """Intersection over union in [0, 1].

    Convention: any zero-area operand yields 0, even for identical
    degenerate boxes.
    """
    if a.area <= 0.0 or b.area <= 0.0:
        return 0.0
    inter = _intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU in [-1, 1]: IoU minus the empty fraction of the hull.

    A zero-area enclosing hull makes the penalty 0/0; it is taken as 0 and
    the plain IoU is returned.
    """
    u = iou(a, b)
    hull_w = max(a.x_max, b.x_max) - min(a.x_min, b.x_min)
    hull_h = max(a.y_max, b.y_max) - min(a.y_min, b.y_min)
    hull = hull_w * hull_h
    if hull <= 0.0:
        return u
    inter = _intersection_area(a, b)
    union = a.area + b.area - inter
    return u - (hull - union) / hull


def l1_center_form(a: Box, b: Box) -> float:
    """L1 distance over (cx, cy, w, h)."""
    ax, ay, aw, ah = a.to_center_form()
    bx, by, bw, bh = b.to_center_form()
    return abs(ax - bx) + abs(ay - by) + abs(aw - bw) + abs(ah - bh)


def pairwise_iou(boxes_a: list[Box], boxes_b: list[Box]) -> np.ndarray:
    """Dense [len(a) x len(b)] IoU matrix."""
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou(a, b)
    return out


def nms(
    dets: list[Detection],
    iou_thresh: float = 0.7,
    class_wise: bool = True,
) -> list[Detection]:
    """Greedy non-maximum suppression.

    Candidates are visited by descending score (ties broken by lowest input
    index); a candidate is suppressed once its IoU with an already-kept box
    of the same class (or any kept box when ``class_wise`` is off) reaches
    ``iou_thresh``. At ``iou_thresh == 1.0`` this removes exact duplicates
    only. Output is the kept subset, sorted by descending score.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[int] = []
    for i in order:
        suppressed = False
        for j in kept:
            if class_wise and dets[i].class_id != dets[j].class_id:
                continue
            if iou(dets[i].box, dets[j].box) >= iou_thresh:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return [dets[i] for i in kept]
