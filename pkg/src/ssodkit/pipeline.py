"""Teacher-student orchestration: EMA updates, stage switching, full steps.

A step runs teacher inference on the weak view, filters pseudo labels (fixed
confidence threshold for the classification/regression losses, cost-based
mining for the consistency loss only), assigns them to student proposals
under the stage's regime, assembles the stage-switched total, and moves the
teacher parameters toward the student's by EMA.

No optimizer is run at desk scale: the student parameter vector is a stand-in
nudged by a seeded schedule, while losses and their gradients are computed
for real on the synthetic proposals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .assignment import hungarian, one_to_many
from .consistency import (
    DecoderParams,
    MlpParams,
    QueryGroup,
    QuerySet,
    build_attention_mask,
    consistency_loss,
    embed_queries,
    roi_align,
    toy_decode,
)
from .cost import CostWeights, MatchScoreParams, build_cost_matrix, match_score_matrix
from .geometry import nms, pairwise_iou
from .losses import FLAVOR_O2M, FLAVOR_O2O, LossBreakdown, o2m_losses, o2o_losses, total_loss
from .mining import EmConfig, PseudoLabel, filter_fixed, filter_mean_std, mine_cost_based
from .simulator import SyntheticImage, match_precision_recall

__all__ = [
    "Stage",
    "StageConfig",
    "PipelineState",
    "StepResult",
    "ema_update",
    "stage_of",
    "semi_step",
    "run_pipeline",
]


class Stage(Enum):
    ONE_TO_MANY = "one_to_many"
    ONE_TO_ONE = "one_to_one"


@dataclass(frozen=True)
class StageConfig:
    """Stage boundary and loss weighting of the training schedule."""

    t1: int = 4
    total_iters: int = 8
    tau_s: float = 0.4
    w_u: float = 4.0
    w_c: float = 1.0
    ema_momentum: float = 0.999

    def __post_init__(self) -> None:
        if not 0 < self.t1 <= self.total_iters:
            raise ValueError(f"need 0 < t1 <= total_iters, got t1={self.t1}, total={self.total_iters}")
        if not 0.0 <= self.tau_s <= 1.0:
            raise ValueError(f"tau_s must be in [0, 1], got {self.tau_s}")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ValueError(f"ema_momentum must be in [0, 1), got {self.ema_momentum}")


def ema_update(teacher: np.ndarray, student: np.ndarray, momentum: float) -> np.ndarray:
    """Exponential moving average: momentum * teacher + (1 - momentum) * student."""
    teacher = np.asarray(teacher, dtype=float)
    student = np.asarray(student, dtype=float)
    if teacher.shape != student.shape:
        raise ValueError(f"shape mismatch: {teacher.shape} vs {student.shape}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    return momentum * teacher + (1.0 - momentum) * student


def stage_of(t: int, cfg: StageConfig) -> Stage:
    """One-to-many through iteration t1 inclusive, one-to-one afterwards."""
    return Stage.ONE_TO_MANY if t <= cfg.t1 else Stage.ONE_TO_ONE


@dataclass
class PipelineConfig:
    """Everything a step needs besides the stage schedule."""

    cost: CostWeights = field(default_factory=CostWeights)
    match: MatchScoreParams = field(default_factory=MatchScoreParams)
    o2m_k: int = 13
    o2m_gamma: float = 2.0
    em: EmConfig = field(default_factory=EmConfig)
    nms_iou: float = 0.7
    nms_class_wise: bool = True
    roi_out: int = 7
    roi_sampling: int = 2
    decoder_dim: int = 16
    decoder_heads: int = 2
    num_matching_queries: int = 4
    param_dim: int = 8


@dataclass
class PipelineState:
    """Mutable orchestration state owned by a single driver."""

    seed: int
    t: int
    teacher_params: np.ndarray
    student_params: np.ndarray
    decoder_teacher: DecoderParams
    decoder_student: DecoderParams
    mlp_teacher: MlpParams
    mlp_student: MlpParams
    queries_teacher: np.ndarray
    queries_student: np.ndarray

    @staticmethod
    def initialize(seed: int, cfg: PipelineConfig, grid_channels: int) -> "PipelineState":
        rng = np.random.default_rng([seed, 977])
        roi_flat = grid_channels * cfg.roi_out * cfg.roi_out
        decoder = DecoderParams.create(rng, cfg.decoder_dim, cfg.decoder_heads, grid_channels)
        mlp = MlpParams.create(rng, roi_flat, cfg.decoder_dim, cfg.decoder_dim)
        queries = rng.normal(0.0, 0.5, size=(cfg.num_matching_queries, cfg.decoder_dim))
        return PipelineState(
            seed=seed,
            t=1,
            teacher_params=rng.normal(size=cfg.param_dim),
            student_params=rng.normal(size=cfg.param_dim),
            decoder_teacher=decoder,
            decoder_student=decoder,
            mlp_teacher=mlp,
            mlp_student=mlp,
            queries_teacher=queries,
            queries_student=queries.copy(),
        )


@dataclass
class StepResult:
    total: float
    sup: LossBreakdown
    unsup: LossBreakdown
    consistency: float
    diagnostics: dict


def _image_losses(
    targets: list[PseudoLabel],
    proposals,
    stage: Stage,
    cfg: PipelineConfig,
) -> LossBreakdown:
    if not targets:
        flavor = FLAVOR_O2M if stage is Stage.ONE_TO_MANY else FLAVOR_O2O
        return LossBreakdown.assemble(flavor=flavor)
    if stage is Stage.ONE_TO_MANY:
        assn = one_to_many(targets, proposals, cfg.match, cfg.o2m_k)
        m = match_score_matrix(targets, proposals, cfg.match)
        u = pairwise_iou([t.box for t in targets], [p.box for p in proposals])
        m_rows = [np.array([m[i, j] for j in js]) for i, js in enumerate(assn.per_target)]
        u_rows = [np.array([u[i, j] for j in js]) for i, js in enumerate(assn.per_target)]
        return o2m_losses(assn, proposals, targets, m_rows, u_rows, cfg.o2m_gamma)
    assn = hungarian(build_cost_matrix(targets, proposals, cfg.cost))
    return o2o_losses(assn, proposals, targets, cfg.cost)


def _sum_breakdowns(parts: list[LossBreakdown], flavor: str) -> LossBreakdown:
    return LossBreakdown.assemble(
        cls=sum(p.cls for p in parts),
        reg_giou=sum(p.reg_giou for p in parts),
        reg_l1=sum(p.reg_l1 for p in parts),
        flavor=flavor,
    )


def _consistency_for_image(
    img: SyntheticImage, mined: list[PseudoLabel], state: PipelineState, cfg: PipelineConfig
) -> float:
    boxes = [p.box for p in mined if p.box.area > 0.0]
    if not boxes:
        return 0.0
    roi_t = [roi_align(img.grid_teacher, b, cfg.roi_out, cfg.roi_out, cfg.roi_sampling) for b in boxes]
    roi_s = [roi_align(img.grid_student, b, cfg.roi_out, cfg.roi_out, cfg.roi_sampling) for b in boxes]
    c_t = embed_queries(roi_t, state.mlp_teacher)
    c_s = embed_queries(roi_s, state.mlp_student)
    groups = [QueryGroup.MATCHING] * state.queries_teacher.shape[0] + [QueryGroup.CONSISTENCY] * len(boxes)
    mask = build_attention_mask(groups)
    # Cross-wiring: each decoder consumes the other view's RoI embeddings.
    teacher_queries = QuerySet(np.vstack([state.queries_teacher, c_s]), groups)
    student_queries = QuerySet(np.vstack([state.queries_student, c_t]), groups)
    dec_t = toy_decode(teacher_queries, img.grid_teacher, mask, state.decoder_teacher)
    dec_s = toy_decode(student_queries, img.grid_student, mask, state.decoder_student)
    n_match = state.queries_teacher.shape[0]
    o_hat_t = dec_t[n_match:]
    o_hat_s = dec_s[n_match:]
    value, _ = consistency_loss(o_hat_s, o_hat_t)
    return value


def semi_step(
    state: PipelineState,
    labeled: list[SyntheticImage],
    unlabeled: list[SyntheticImage],
    stage_cfg: StageConfig,
    cfg: PipelineConfig = PipelineConfig(),
) -> StepResult:
    """One full desk-scale iteration; mutates ``state`` (iteration, EMA, nudge).

    Pseudo labels above the fixed confidence threshold drive the
    classification/regression losses; cost-mined pseudo labels drive the
    consistency loss only. Diagnostics record the routing, the pseudo-label
    quality against hidden truth, and every loss part.
    """
    stage = stage_of(state.t, stage_cfg)
    flavor = FLAVOR_O2M if stage is Stage.ONE_TO_MANY else FLAVOR_O2O

    sup_parts = []
    for img in labeled:
        gt_targets = [PseudoLabel(b, c, 1.0) for b, c in zip(img.gt_boxes, img.gt_classes)]
        sup_parts.append(_image_losses(gt_targets, img.student_props, stage, cfg))
    sup = _sum_breakdowns(sup_parts, flavor)

    pseudo_sets: list[list[PseudoLabel]] = []
    meanstd_sets: list[list[PseudoLabel]] = []
    unsup_parts = []
    for img in unlabeled:
        dets = nms(img.teacher_dets, cfg.nms_iou, cfg.nms_class_wise)
        pseudo = filter_fixed(dets, stage_cfg.tau_s)
        pseudo_sets.append(pseudo)
        meanstd_sets.append(filter_mean_std(dets))
        unsup_parts.append(_image_losses(pseudo, img.student_props, stage, cfg))
    unsup = _sum_breakdowns(unsup_parts, flavor)

    mined_sets, mine_diag = mine_cost_based(
        meanstd_sets, [img.student_props for img in unlabeled], cfg.cost, cfg.em
    )
    cons_values = [
        _consistency_for_image(img, mined, state, cfg)
        for img, mined in zip(unlabeled, mined_sets)
    ]
    active = [v for v, mined in zip(cons_values, mined_sets) if mined]
    consistency_value = float(np.mean(active)) if active else 0.0

    total = total_loss(
        state.t, stage_cfg.t1, sup, unsup, consistency_value, stage_cfg.w_u, stage_cfg.w_c
    )

    precision, recall, kept, _ = match_precision_recall(pseudo_sets, unlabeled)
    diagnostics = {
        "t": state.t,
        "stage": stage.value,
        "sup_cls": sup.cls,
        "sup_reg_giou": sup.reg_giou,
        "sup_reg_l1": sup.reg_l1,
        "unsup_cls": unsup.cls,
        "unsup_reg_giou": unsup.reg_giou,
        "unsup_reg_l1": unsup.reg_l1,
        "consistency": consistency_value,
        "total": total,
        "pseudo_fixed": kept,
        "pseudo_fixed_precision": precision,
        "pseudo_fixed_recall": recall,
        "pseudo_meanstd": sum(len(s) for s in meanstd_sets),
        "pseudo_mined": mine_diag.kept,
        "mining_degenerate": mine_diag.degenerate_fit,
        "cls_reg_targets": [
            (img.index, p.source_index) for img, ps in zip(unlabeled, pseudo_sets) for p in ps
        ],
        "consistency_targets": [
            (img.index, p.source_index) for img, ps in zip(unlabeled, mined_sets) for p in ps
        ],
        "ema_distance": float(np.linalg.norm(state.teacher_params - state.student_params)),
    }

    state.teacher_params = ema_update(
        state.teacher_params, state.student_params, stage_cfg.ema_momentum
    )
    nudge_rng = np.random.default_rng([state.seed, 104729, state.t])
    state.student_params = state.student_params + 0.01 * nudge_rng.normal(
        size=state.student_params.shape
    )
    state.t += 1
    return StepResult(total, sup, unsup, consistency_value, diagnostics)


def run_pipeline(
    dataset,
    stage_cfg: StageConfig,
    cfg: PipelineConfig = PipelineConfig(),
    labeled_per_batch: int = 1,
    unlabeled_per_batch: int = 4,
) -> list[StepResult]:
    """Drive semi_step over the dataset for the configured number of iterations.

    The first fifth of the images (at least one) form the labeled pool, the
    rest the unlabeled pool; batches cycle through both pools round-robin,
    preserving the configured labeled:unlabeled ratio.
    """
    images = dataset.images
    n_labeled_pool = max(1, len(images) // 5)
    labeled_pool = images[:n_labeled_pool]
    unlabeled_pool = images[n_labeled_pool:] or images
    state = PipelineState.initialize(dataset.scenario.seed, cfg, dataset.scenario.grid_channels)
    results = []
    for step in range(stage_cfg.total_iters):
        labeled = [labeled_pool[(step * labeled_per_batch + i) % len(labeled_pool)]
                   for i in range(labeled_per_batch)]
        unlabeled = [unlabeled_pool[(step * unlabeled_per_batch + i) % len(unlabeled_pool)]
                     for i in range(unlabeled_per_batch)]
        results.append(semi_step(state, labeled, unlabeled, stage_cfg, cfg))
    return results
