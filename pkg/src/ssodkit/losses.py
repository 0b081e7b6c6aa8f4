"""Classification/regression losses for both assignment regimes, with gradients.

The one-to-many stage uses quality-focal style terms: positives are pulled
toward a normalized match quality ``m_hat`` instead of a hard 1, negatives
toward 0, both down-weighted by how far the score already is from its
target. The one-to-one stage uses plain focal classification plus GIoU and
L1 regression on the matched pairs.

Every loss returns closed-form derivatives with respect to the proposal
quantities it touches (scores, or boxes in center form); finite-difference
checks in the test suite pin them down. Probabilities are clamped inside
logs only, so exact zeros at the boundaries stay exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assignment import Assignment, AssignmentMode
from .cost import PROB_EPS, CostWeights
from .geometry import Box, Detection, l1_center_form

__all__ = [
    "LossBreakdown",
    "NormalizedScore",
    "StageFlavorError",
    "normalize_match_scores",
    "o2m_cls_loss",
    "o2m_reg_loss",
    "o2m_losses",
    "o2o_losses",
    "total_loss",
    "giou_with_grad",
    "l1_center_with_grad",
]

FLAVOR_O2M = "o2m"
FLAVOR_O2O = "o2o"


class StageFlavorError(ValueError):
    """A loss breakdown of the wrong stage flavor was fed to the total."""


@dataclass
class LossBreakdown:
    """Weighted loss parts; ``total`` is their sum (checked to 1e-9 relative).

    ``grads``, when present, is a flat vector whose layout is documented by
    the producing operation. ``flavor`` tags which assignment regime
    produced the breakdown so stage switching can be validated.
    """

    cls: float
    reg_giou: float
    reg_l1: float
    consistency: float
    total: float
    grads: np.ndarray | None = None
    flavor: str = field(default=FLAVOR_O2O)

    def __post_init__(self) -> None:
        parts = self.cls + self.reg_giou + self.reg_l1 + self.consistency
        if abs(self.total - parts) > 1e-9 * max(1.0, abs(parts)):
            raise ValueError(f"total {self.total} != sum of parts {parts}")

    @classmethod
    def assemble(
        cls_,
        cls: float = 0.0,
        reg_giou: float = 0.0,
        reg_l1: float = 0.0,
        consistency: float = 0.0,
        grads: np.ndarray | None = None,
        flavor: str = FLAVOR_O2O,
    ) -> "LossBreakdown":
        total = cls + reg_giou + reg_l1 + consistency
        return cls_(cls, reg_giou, reg_l1, consistency, total, grads, flavor)


@dataclass
class NormalizedScore:
    """Per-target arrays of normalized match qualities ``m_hat`` in [0, 1]."""

    per_target: list[np.ndarray]

    def flat(self) -> np.ndarray:
        if not self.per_target:
            return np.zeros(0)
        return np.concatenate(self.per_target)


def _safe_log(x: float) -> float:
    return math.log(max(x, PROB_EPS))


def _bce(s: float, t: float) -> float:
    return -t * _safe_log(s) - (1.0 - t) * _safe_log(1.0 - s)


def _bce_grad(s: float, t: float) -> float:
    return -t / max(s, PROB_EPS) + (1.0 - t) / max(1.0 - s, PROB_EPS)


def normalize_match_scores(
    assignment: Assignment,
    match_scores: list[np.ndarray],
    ious: list[np.ndarray],
) -> NormalizedScore:
    """Rescale each target's match scores so their max equals its max IoU.

    ``match_scores[i]`` and ``ious[i]`` align with ``assignment.per_target[i]``.
    Targets whose best match score is 0 get all-zero qualities. Every target
    must carry at least one positive.
    """
    out: list[np.ndarray] = []
    for i, js in enumerate(assignment.per_target):
        m = np.asarray(match_scores[i], dtype=float)
        u = np.asarray(ious[i], dtype=float)
        if len(js) == 0 or m.size == 0:
            raise ValueError(f"target {i} has no positives")
        if m.size != len(js) or u.size != len(js):
            raise ValueError(f"target {i}: scores/ious misaligned with assignment")
        max_m = float(m.max())
        if max_m <= 0.0:
            out.append(np.zeros_like(m))
        else:
            out.append(m * (float(u.max()) / max_m))
    return NormalizedScore(out)


def o2m_cls_loss(
    positives: list[tuple[float, float]],
    negatives: list[float],
    gamma: float = 2.0,
) -> tuple[float, np.ndarray]:
    """Quality-focal classification loss of the one-to-many stage.

    ``positives`` holds (score, m_hat) pairs; each contributes
    ``|m_hat - s|^gamma * BCE(s, m_hat)``. Each negative score contributes
    ``s^gamma * BCE(s, 0)``. Returns the loss and its derivative with
    respect to every score, positives first then negatives.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    loss = 0.0
    grads = np.zeros(len(positives) + len(negatives))
    for idx, (s, m_hat) in enumerate(positives):
        d = m_hat - s
        weight = abs(d) ** gamma if gamma > 0 else 1.0
        b = _bce(s, m_hat)
        loss += weight * b
        dweight = 0.0
        if gamma > 0 and d != 0.0:
            dweight = -gamma * math.copysign(abs(d) ** (gamma - 1.0), d)
        grads[idx] = dweight * b + weight * _bce_grad(s, m_hat)
    for idx, s in enumerate(negatives):
        weight = s**gamma if gamma > 0 else 1.0
        b = -_safe_log(1.0 - s)  # BCE(s, 0)
        loss += weight * b
        dweight = gamma * s ** (gamma - 1.0) if gamma > 0 and s > 0.0 else 0.0
        if gamma == 0:
            dweight = 0.0
        grads[len(positives) + idx] = dweight * b + weight / max(1.0 - s, PROB_EPS)
    return loss, grads


def giou_with_grad(a: Box, b: Box) -> tuple[float, np.ndarray]:
    """GIoU of ``a`` against fixed ``b`` plus its gradient in (cx, cy, w, h) of ``a``.

    Piecewise boundaries (touching boxes, hull edges changing hands) take
    the one-sided subgradient of the active branch, keeping the hull terms.
    """
    ax1, ay1, ax2, ay2 = a.x_min, a.y_min, a.x_max, a.y_max
    bx1, by1, bx2, by2 = b.x_min, b.y_min, b.x_max, b.y_max
    aw, ah = ax2 - ax1, ay2 - ay1
    area_a = aw * ah
    area_b = (bx2 - bx1) * (by2 - by1)

    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = iw * ih if (iw > 0.0 and ih > 0.0) else 0.0
    union = area_a + area_b - inter
    hw = max(ax2, bx2) - min(ax1, bx1)
    hh = max(ay2, by2) - min(ay1, by1)
    hull = hw * hh

    # Corner-form partials, order (x1, y1, x2, y2).
    d_area = np.array([-ah, -aw, ah, aw])
    d_inter = np.zeros(4)
    if inter > 0.0:
        d_iw = np.array([-1.0 if ax1 > bx1 else 0.0, 0.0, 1.0 if ax2 < bx2 else 0.0, 0.0])
        d_ih = np.array([0.0, -1.0 if ay1 > by1 else 0.0, 0.0, 1.0 if ay2 < by2 else 0.0])
        d_inter = ih * d_iw + iw * d_ih
    d_hw = np.array([1.0 if ax1 < bx1 else 0.0, 0.0, 1.0 if ax2 > bx2 else 0.0, 0.0])
    d_hh = np.array([0.0, 1.0 if ay1 < by1 else 0.0, 0.0, 1.0 if ay2 > by2 else 0.0])
    d_hull = hh * d_hw + hw * d_hh
    d_union = d_area - d_inter

    if area_a <= 0.0 or area_b <= 0.0 or union <= 0.0:
        value_iou, d_iou = 0.0, np.zeros(4)
    else:
        value_iou = inter / union
        d_iou = (d_inter * union - inter * d_union) / union**2
    if hull <= 0.0:
        value, d_corner = value_iou, d_iou
    else:
        # giou = iou - 1 + union / hull
        value = value_iou - (hull - union) / hull
        d_corner = d_iou + (d_union * hull - union * d_hull) / hull**2

    grad_center = np.array(
        [
            d_corner[0] + d_corner[2],
            d_corner[1] + d_corner[3],
            (d_corner[2] - d_corner[0]) / 2.0,
            (d_corner[3] - d_corner[1]) / 2.0,
        ]
    )
    return value, grad_center


def l1_center_with_grad(a: Box, b: Box) -> tuple[float, np.ndarray]:
    """Center-form L1 distance plus its gradient in (cx, cy, w, h) of ``a``."""
    pa = np.array(a.to_center_form())
    pb = np.array(b.to_center_form())
    return float(np.abs(pa - pb).sum()), np.sign(pa - pb)


def o2m_reg_loss(
    positives: list[tuple[float, Box, Box]],
) -> tuple[float, np.ndarray]:
    """Quality-weighted regression loss of the one-to-many stage.

    Each (m_hat, box, target_box) triple contributes
    ``m_hat * (1 - GIoU) + m_hat * L1`` in center form. Returns the loss and
    an [n, 4] gradient with respect to each box's (cx, cy, w, h).
    """
    loss = 0.0
    grads = np.zeros((len(positives), 4))
    for idx, (m_hat, box, target_box) in enumerate(positives):
        g, dg = giou_with_grad(box, target_box)
        l1, dl1 = l1_center_with_grad(box, target_box)
        loss += m_hat * (1.0 - g) + m_hat * l1
        grads[idx] = m_hat * (-dg + dl1)
    return loss, grads


def o2m_losses(
    assignment: Assignment,
    proposals: list[Detection],
    targets: list,
    match_scores: list[np.ndarray],
    ious: list[np.ndarray],
    gamma: float = 2.0,
) -> LossBreakdown:
    """Assemble the full one-to-many breakdown for an assignment.

    Positives take their score at the owning target's class; all proposals
    positive for no target are negatives, entering with their top score.
    Targets that lost every positive to conflict resolution are skipped.
    """
    occupied = [i for i, js in enumerate(assignment.per_target) if js]
    sub = Assignment(
        [assignment.per_target[i] for i in occupied], None, AssignmentMode.ONE_TO_MANY
    )
    m_hat = normalize_match_scores(
        sub, [match_scores[i] for i in occupied], [ious[i] for i in occupied]
    )
    cls_pos: list[tuple[float, float]] = []
    reg_pos: list[tuple[float, Box, Box]] = []
    for row, i in enumerate(occupied):
        tgt = targets[i]
        for slot, j in enumerate(assignment.per_target[i]):
            q = float(m_hat.per_target[row][slot])
            cls_pos.append((float(proposals[j].scores[tgt.class_id]), q))
            reg_pos.append((q, proposals[j].box, tgt.box))
    positive_set = assignment.positives()
    negatives = [p.score for j, p in enumerate(proposals) if j not in positive_set]
    cls_val, _ = o2m_cls_loss(cls_pos, negatives, gamma)
    reg_val, _ = o2m_reg_loss(reg_pos)
    # Split the regression value back into its GIoU and L1 parts for reporting.
    reg_giou = sum(q * (1.0 - giou_with_grad(b, tb)[0]) for q, b, tb in reg_pos)
    reg_l1 = reg_val - reg_giou
    return LossBreakdown.assemble(
        cls=cls_val, reg_giou=reg_giou, reg_l1=reg_l1, flavor=FLAVOR_O2M
    )


def _focal_pos_with_grad(p: float, w: CostWeights) -> tuple[float, float]:
    pc = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
    val = w.focal_alpha * (1.0 - pc) ** w.focal_gamma * (-math.log(pc))
    g = w.focal_gamma
    if g > 0:
        grad = w.focal_alpha * (g * (1.0 - pc) ** (g - 1.0) * math.log(pc) - (1.0 - pc) ** g / pc)
    else:
        grad = -w.focal_alpha / pc
    return val, grad


def _focal_neg_with_grad(p: float, w: CostWeights) -> tuple[float, float]:
    pc = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
    val = (1.0 - w.focal_alpha) * pc**w.focal_gamma * (-math.log(1.0 - pc))
    g = w.focal_gamma
    if g > 0:
        grad = (1.0 - w.focal_alpha) * (
            g * pc ** (g - 1.0) * (-math.log(1.0 - pc)) + pc**g / (1.0 - pc)
        )
    else:
        grad = (1.0 - w.focal_alpha) / (1.0 - pc)
    return val, grad


def o2o_losses(
    assignment: Assignment,
    proposals: list[Detection],
    targets: list,
    w: CostWeights,
) -> LossBreakdown:
    """Standard one-to-one losses on a Hungarian matching.

    Matched proposals take a focal positive term at the target class and
    focal negatives on every other class, plus lambda-weighted GIoU and L1
    regression toward the matched box; unmatched proposals are all-negative.
    ``grads`` is flat with a per-proposal block of ``num_classes`` score
    derivatives followed by (cx, cy, w, h) derivatives.
    """
    if assignment.mode is not AssignmentMode.ONE_TO_ONE:
        raise ValueError("o2o_losses requires a one-to-one assignment")
    if assignment.per_proposal is None:
        raise ValueError("one-to-one assignment must carry its inverse map")
    num_classes = proposals[0].scores.size if proposals else 0
    block = num_classes + 4
    grads = np.zeros(len(proposals) * block)
    cls_val = 0.0
    reg_giou_val = 0.0
    reg_l1_val = 0.0
    for j, prop in enumerate(proposals):
        target_i = assignment.per_proposal.get(j)
        target_cls = targets[target_i].class_id if target_i is not None else None
        base = j * block
        for c in range(num_classes):
            p = float(prop.scores[c])
            if c == target_cls:
                val, grad = _focal_pos_with_grad(p, w)
            else:
                val, grad = _focal_neg_with_grad(p, w)
            cls_val += w.lambda_cls * val
            grads[base + c] = w.lambda_cls * grad
        if target_i is not None:
            t_box = targets[target_i].box
            g, dg = giou_with_grad(prop.box, t_box)
            l1, dl1 = l1_center_with_grad(prop.box, t_box)
            reg_giou_val += w.lambda_giou * (1.0 - g)
            reg_l1_val += w.lambda_l1 * l1
            grads[base + num_classes : base + block] = w.lambda_giou * -dg + w.lambda_l1 * dl1
    return LossBreakdown.assemble(
        cls=cls_val, reg_giou=reg_giou_val, reg_l1=reg_l1_val, grads=grads, flavor=FLAVOR_O2O
    )


def total_loss(
    stage_t: int,
    t1: int,
    sup: LossBreakdown,
    unsup: LossBreakdown,
    consistency: float,
    w_u: float,
    w_c: float,
) -> float:
    """Stage-switched combination: supervised + w_u * unsupervised + w_c * consistency.

    Iterations up to and including ``t1`` must carry one-to-many
    breakdowns, later ones one-to-one; a mismatched flavor raises
    ``StageFlavorError``.
    """
    expected = FLAVOR_O2M if stage_t <= t1 else FLAVOR_O2O
    for name, br in (("sup", sup), ("unsup", unsup)):
        if br.flavor != expected:
            raise StageFlavorError(
                f"{name} breakdown is '{br.flavor}' but iteration {stage_t} "
                f"(t1={t1}) requires '{expected}'"
            )
    return sup.total + w_u * unsup.total + w_c * consistency
