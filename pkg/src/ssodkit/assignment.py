"""Label-assignment strategies: optimal one-to-one plus four one-to-many rules.

The one-to-one route is the Hungarian solution of a cost matrix; the ranked
one-to-many route takes the top-k proposals per target by match score. The
Max-IoU, ATSS, and SimOTA assigners are single-level adaptations kept for
ablation comparisons. All ties break toward the lowest index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cost import CostMatrix, CostWeights, MatchScoreParams, focal_cls_cost, match_score_matrix
from .geometry import Detection, pairwise_iou

__all__ = [
    "AssignmentMode",
    "Assignment",
    "InfeasibleAssignmentError",
    "hungarian",
    "one_to_many",
    "max_iou_assign",
    "atss_assign",
    "simota_assign",
]


class AssignmentMode(Enum):
    ONE_TO_ONE = "one_to_one"
    ONE_TO_MANY = "one_to_many"


class InfeasibleAssignmentError(Exception):
    """Raised when a one-to-one matching is requested with too few proposals."""


@dataclass
class Assignment:
    """Bidirectional target/proposal map.

    ``per_target[i]`` lists the proposal indices assigned to target i
    (singletons in one-to-one mode). ``per_proposal`` is the inverse map
    when it is a function (one-to-one, or one-to-many with conflicts
    resolved); proposals absent from it are negatives. ``degenerate_k``
    flags one-to-many problems where k exceeded the number of proposals.
    """

    per_target: list[list[int]]
    per_proposal: dict[int, int] | None
    mode: AssignmentMode
    degenerate_k: bool = field(default=False)

    def positives(self) -> set[int]:
        """All proposal indices assigned to at least one target."""
        return {j for js in self.per_target for j in js}

    def validate(self, num_proposals: int) -> None:
        """Assert structural consistency; used by tests and callers in debug paths."""
        for js in self.per_target:
            for j in js:
                if not 0 <= j < num_proposals:
                    raise AssertionError(f"proposal index {j} out of range")
        if self.mode is AssignmentMode.ONE_TO_ONE:
            flat = [j for js in self.per_target for j in js]
            if len(flat) != len(set(flat)):
                raise AssertionError("one-to-one assignment reuses a proposal")
            if any(len(js) > 1 for js in self.per_target):
                raise AssertionError("one-to-one target with multiple proposals")
        if self.per_proposal is not None:
            for i, js in enumerate(self.per_target):
                for j in js:
                    if self.per_proposal.get(j) != i:
                        raise AssertionError(f"inverse map disagrees at proposal {j}")
            n_pairs = sum(len(js) for js in self.per_target)
            if len(self.per_proposal) != n_pairs:
                raise AssertionError("inverse map size disagrees with per_target")


def hungarian(costs: CostMatrix) -> Assignment:
    """Minimum-cost one-to-one matching of every target to a distinct proposal.

    The total cost equals the minimum over all injections of targets into
    proposals. Requires at least as many proposals as targets.
    """
    if costs.num_targets > costs.num_proposals:
        raise InfeasibleAssignmentError(
            f"{costs.num_targets} targets but only {costs.num_proposals} proposals"
        )
    if costs.is_empty:
        return Assignment([[] for _ in range(costs.num_targets)], {}, AssignmentMode.ONE_TO_ONE)
    rows, cols = linear_sum_assignment(costs.values)
    per_target: list[list[int]] = [[] for _ in range(costs.num_targets)]
    per_proposal: dict[int, int] = {}
    for i, j in zip(rows.tolist(), cols.tolist()):
        per_target[i] = [j]
        per_proposal[j] = i
    return Assignment(per_target, per_proposal, AssignmentMode.ONE_TO_ONE)


def _top_k_by_score(scores_row: np.ndarray, k: int) -> list[int]:
    # Sort by descending score, ties by lowest index.
    order = sorted(range(scores_row.size), key=lambda j: (-scores_row[j], j))
    return order[:k]


def _resolve_conflicts_max(
    per_target: list[list[int]], score_of: np.ndarray
) -> tuple[list[list[int]], dict[int, int]]:
    """Give each contested proposal to the target scoring it highest (no refill)."""
    claims: dict[int, list[int]] = {}
    for i, js in enumerate(per_target):
        for j in js:
            claims.setdefault(j, []).append(i)
    winner = {
        j: max(owners, key=lambda i: (score_of[i, j], -i)) for j, owners in claims.items()
    }
    resolved = [[j for j in js if winner[j] == i] for i, js in enumerate(per_target)]
    return resolved, winner


def one_to_many(
    targets: list,
    proposals: list[Detection],
    params: MatchScoreParams,
    k: int,
    resolve_conflicts: bool = True,
) -> Assignment:
    """Assign each target the k proposals with the largest match score.

    With ``resolve_conflicts`` a proposal wanted by several targets goes to
    the one with the largest score for it and is dropped from the rest
    without refilling, so the inverse map is a function. If k exceeds the
    number of proposals, every proposal is assigned (ranked) and the result
    is flagged degenerate.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not proposals:
        raise ValueError("proposals must be non-empty")
    m = match_score_matrix(targets, proposals, params)
    degenerate = k > len(proposals)
    per_target = [_top_k_by_score(m[i], min(k, len(proposals))) for i in range(len(targets))]
    per_proposal: dict[int, int] | None = None
    if resolve_conflicts:
        per_target, per_proposal = _resolve_conflicts_max(per_target, m)
    return Assignment(per_target, per_proposal, AssignmentMode.ONE_TO_MANY, degenerate)


def max_iou_assign(
    targets: list,
    proposals: list[Detection],
    pos_thresh: float = 0.5,
    rescue: bool = False,
) -> Assignment:
    """Threshold assigner: each proposal joins its highest-IoU target.

    A proposal becomes positive for the target it overlaps most, provided
    that IoU reaches ``pos_thresh``. With ``rescue`` each target
    additionally claims its own best proposal even below threshold
    (overriding that proposal's previous owner).
    """
    ious = pairwise_iou([t.box for t in targets], [p.box for p in proposals])
    per_target: list[list[int]] = [[] for _ in range(len(targets))]
    owner: dict[int, int] = {}
    for j in range(len(proposals)):
        if not len(targets):
            break
        i_best = int(np.argmax(ious[:, j]))  # argmax ties -> lowest index
        if ious[i_best, j] >= pos_thresh:
            owner[j] = i_best
    if rescue:
        for i in range(len(targets)):
            if not len(proposals):
                break
            j_best = int(np.argmax(ious[i]))
            owner[j_best] = i
    for j, i in owner.items():
        per_target[i].append(j)
    per_target = [sorted(js) for js in per_target]
    return Assignment(per_target, owner, AssignmentMode.ONE_TO_MANY)


def atss_assign(
    targets: list,
    proposals: list[Detection],
    candidate_k: int = 9,
) -> Assignment:
    """Adaptive-threshold assigner on a single level.

    Per target: take the ``candidate_k`` proposals nearest by center
    distance, set the threshold to mean + std of their IoUs, and keep
    candidates at or above it whose centers fall inside the target box.
    A proposal positive for several targets goes to the highest-IoU one.
    """
    if candidate_k < 1:
        raise ValueError(f"candidate_k must be >= 1, got {candidate_k}")
    ious = pairwise_iou([t.box for t in targets], [p.box for p in proposals])
    centers = np.array([p.box.center for p in proposals])
    per_target: list[list[int]] = [[] for _ in range(len(targets))]
    claims: dict[int, list[int]] = {}
    for i, tgt in enumerate(targets):
        tc = np.array(tgt.box.center)
        dists = np.linalg.norm(centers - tc, axis=1) if len(proposals) else np.array([])
        n_cand = min(candidate_k, len(proposals))
        cand = sorted(range(len(proposals)), key=lambda j: (dists[j], j))[:n_cand]
        if not cand:
            continue
        cand_ious = ious[i, cand]
        thresh = float(np.mean(cand_ious) + np.std(cand_ious))
        for j in cand:
            cx, cy = proposals[j].box.center
            if ious[i, j] >= thresh and tgt.box.contains_point(cx, cy):
                claims.setdefault(j, []).append(i)
    owner = {j: max(owners, key=lambda i: (ious[i, j], -i)) for j, owners in claims.items()}
    for j, i in owner.items():
        per_target[i].append(j)
    per_target = [sorted(js) for js in per_target]
    return Assignment(per_target, owner, AssignmentMode.ONE_TO_MANY)


def simota_assign(
    targets: list,
    proposals: list[Detection],
    w: CostWeights,
) -> Assignment:
    """Dynamic-k assigner: per-target k from summed top-10 IoUs, min-cost picks.

    Cost per pair is the focal classification cost plus ``3 * -log(IoU + 1e-8)``;
    contested proposals go to their minimum-cost target, no refill.
    """
    ious = pairwise_iou([t.box for t in targets], [p.box for p in proposals])
    n_p = len(proposals)
    costs = np.zeros((len(targets), n_p))
    for i, tgt in enumerate(targets):
        for j, prop in enumerate(proposals):
            c_cls = focal_cls_cost(float(prop.scores[tgt.class_id]), True, w)
            costs[i, j] = c_cls + 3.0 * -math.log(ious[i, j] + 1e-8)
    per_target: list[list[int]] = [[] for _ in range(len(targets))]
    for i in range(len(targets)):
        if n_p == 0:
            continue
        top = np.sort(ious[i])[::-1][:10]
        dyn_k = int(min(max(math.floor(top.sum() + 0.5), 1), n_p))  # round half up
        order = sorted(range(n_p), key=lambda j: (costs[i, j], j))
        per_target[i] = order[:dyn_k]
    per_target, owner = _resolve_conflicts_max(per_target, -costs)
    return Assignment(per_target, owner, AssignmentMode.ONE_TO_MANY)
