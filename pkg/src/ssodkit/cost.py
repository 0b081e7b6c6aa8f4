"""Pairwise matching costs between targets and proposals.

Two cost flavors are built here: the weighted classification/GIoU/L1 cost
matrix used by bipartite matching and by cost-based pseudo-label mining, and
the multiplicative score ``s^alpha * u^beta`` used to rank proposals in the
one-to-many regime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box, Detection, giou, iou, l1_center_form

__all__ = [
    "CostWeights",
    "CostMatrix",
    "MatchScoreParams",
    "match_score",
    "focal_pos_cost",
    "focal_neg_cost",
    "focal_cls_cost",
    "build_cost_matrix",
    "match_score_matrix",
    "PROB_EPS",
]

# Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before any log.
PROB_EPS = 1e-8


@dataclass(frozen=True)
class CostWeights:
    """Weights of the classification / GIoU / L1 cost terms plus focal params.

    Defaults follow the usual DETR-family matcher configuration.
    """

    lambda_cls: float = 2.0
    lambda_giou: float = 2.0
    lambda_l1: float = 5.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self) -> None:
        lams = (self.lambda_cls, self.lambda_giou, self.lambda_l1)
        if not all(math.isfinite(v) and v >= 0 for v in lams):
            raise ValueError(f"lambda weights must be finite and >= 0: {lams}")
        if max(lams) <= 0:
            raise ValueError("at least one lambda weight must be positive")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ValueError(f"focal_alpha must be in (0, 1), got {self.focal_alpha}")
        if not (math.isfinite(self.focal_gamma) and self.focal_gamma >= 0):
            raise ValueError(f"focal_gamma must be finite and >= 0, got {self.focal_gamma}")


@dataclass(frozen=True)
class MatchScoreParams:
    """Exponents of the classification score and IoU in the match score."""

    alpha: float = 1.0
    beta: float = 6.0

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"exponents must be >= 0: alpha={self.alpha}, beta={self.beta}")


@dataclass
class CostMatrix:
    """Dense [num_targets x num_proposals] cost matrix with index vectors."""

    values: np.ndarray
    target_ids: np.ndarray
    proposal_ids: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        self.target_ids = np.asarray(self.target_ids, dtype=int)
        self.proposal_ids = np.asarray(self.proposal_ids, dtype=int)
        if self.values.shape != (self.target_ids.size, self.proposal_ids.size):
            raise ValueError(
                f"shape mismatch: values {self.values.shape} vs ids "
                f"({self.target_ids.size}, {self.proposal_ids.size})"
            )
        if self.values.size and not np.all(np.isfinite(self.values)):
            raise ValueError("cost entries must be finite")

    @property
    def num_targets(self) -> int:
        return self.values.shape[0]

    @property
    def num_proposals(self) -> int:
        return self.values.shape[1]

    @property
    def is_empty(self) -> bool:
        """Distinguished empty-problem marker: no targets or no proposals."""
        return self.values.size == 0


def match_score(s: float, u: float, params: MatchScoreParams) -> float:
    """Ranking score ``s^alpha * u^beta`` in [0, 1].

    Monotone non-decreasing in both the classification score ``s`` and the
    IoU ``u`` (0**0 is taken as 1, so a zero exponent ignores its factor).
    """
    if not 0.0 <= s <= 1.0 or not 0.0 <= u <= 1.0:
        raise ValueError(f"s and u must lie in [0, 1]: s={s}, u={u}")
    return s**params.alpha * u**params.beta


def _clamp_prob(p: float) -> float:
    return min(max(p, PROB_EPS), 1.0 - PROB_EPS)


def focal_pos_cost(p: float, w: CostWeights) -> float:
    """Focal cost of predicting probability ``p`` for a class that is the label."""
    p = _clamp_prob(p)
    return w.focal_alpha * (1.0 - p) ** w.focal_gamma * (-math.log(p))


def focal_neg_cost(p: float, w: CostWeights) -> float:
    """Focal cost of predicting probability ``p`` for a class that is background."""
    p = _clamp_prob(p)
    return (1.0 - w.focal_alpha) * p**w.focal_gamma * (-math.log(1.0 - p))


def focal_cls_cost(score: float, is_target_class: bool, w: CostWeights) -> float:
    """Per-pair classification cost for the matcher.

    For the target class this is the focal positive cost minus the focal
    negative cost (the change in classification loss if the proposal were
    matched rather than left as background); other classes contribute 0.
    """
    if not is_target_class:
        return 0.0
    return focal_pos_cost(score, w) - focal_neg_cost(score, w)


def build_cost_matrix(
    targets: list,
    proposals: list[Detection],
    w: CostWeights,
) -> CostMatrix:
    """Matching cost between every target and proposal.

    ``values[i][j] = lambda_cls * C_cls + lambda_giou * (-giou) + lambda_l1 * L1``
    where ``C_cls`` is the focal pair cost of proposal j's probability for
    target i's class. Targets need ``box`` and ``class_id`` attributes
    (pseudo labels or ground-truth records both qualify). Empty inputs give
    the distinguished empty-problem matrix rather than raising.
    """
    n_t, n_p = len(targets), len(proposals)
    values = np.zeros((n_t, n_p))
    for i, tgt in enumerate(targets):
        t_box: Box = tgt.box
        t_cls: int = tgt.class_id
        for j, prop in enumerate(proposals):
            if t_cls >= prop.scores.size:
                raise ValueError(
                    f"target class {t_cls} outside proposal score vector of size {prop.scores.size}"
                )
            c_cls = focal_cls_cost(float(prop.scores[t_cls]), True, w)
            c_giou = -giou(prop.box, t_box)
            c_l1 = l1_center_form(prop.box, t_box)
            values[i, j] = w.lambda_cls * c_cls + w.lambda_giou * c_giou + w.lambda_l1 * c_l1
    return CostMatrix(values, np.arange(n_t), np.arange(n_p))


def match_score_matrix(
    targets: list,
    proposals: list[Detection],
    params: MatchScoreParams,
) -> np.ndarray:
    """[num_targets x num_proposals] matrix of ``s^alpha * u^beta``.

    ``s`` is each proposal's probability for the target's class and ``u``
    the proposal/target IoU.
    """
    out = np.zeros((len(targets), len(proposals)))
    for i, tgt in enumerate(targets):
        for j, prop in enumerate(proposals):
            s = float(prop.scores[tgt.class_id])
            u = iou(prop.box, tgt.box)
            out[i, j] = match_score(s, u, params)
    return out
