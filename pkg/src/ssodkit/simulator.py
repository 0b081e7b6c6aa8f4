"""Synthetic detection scenarios with a parameterized noise model.

Each image gets hidden ground truth, a teacher's weak-view detections
(jittered copies of the truth with calibrated confidences plus spurious
boxes), a student's strong-view proposal set shaped like detector queries
(clustered unevenly over objects, padded with background boxes), and a pair
of feature grids for the two views. Everything is driven by per-image RNG
streams derived from (seed, image index), so image-level parallelism cannot
change a single byte of any result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assignment import hungarian, max_iou_assign, atss_assign, one_to_many, simota_assign
from .consistency import FeatureGrid
from .cost import CostWeights, MatchScoreParams, build_cost_matrix
from .geometry import Box, Detection, iou, nms, pairwise_iou
from .mining import (
    EmConfig,
    PseudoLabel,
    filter_fixed,
    filter_mean_std,
    filter_topk,
    mine_cost_based,
)
from .parallel import parallel_map
from .reports import EvalReport, EvalRow

__all__ = [
    "ConfidenceCalibration",
    "NoiseModel",
    "Scenario",
    "SyntheticImage",
    "SyntheticDataset",
    "generate",
    "eval_filtering",
    "eval_assignment_quality",
    "eval_strategy_ablation",
    "match_precision_recall",
]


@dataclass(frozen=True)
class ConfidenceCalibration:
    """Score distribution of a detection given its IoU to the box it came from."""

    intercept: float = 0.2
    slope: float = 0.75
    sd: float = 0.1

    def sample(self, rng: np.random.Generator, iou_to_source: float) -> float:
        raw = rng.normal(self.intercept + self.slope * iou_to_source, self.sd)
        # Floor slightly above 0 so score vectors keep a well-defined argmax.
        return float(min(max(raw, 1e-3), 1.0))


@dataclass(frozen=True)
class NoiseModel:
    """Perturbations applied when synthesizing detector outputs from truth."""

    center_jitter_sigma: float = 0.02
    scale_jitter_sigma: float = 0.25
    confidence_calibration: ConfidenceCalibration = field(default_factory=ConfidenceCalibration)
    false_positive_rate: float = 30.0
    class_flip_prob: float = 0.03
    dets_per_gt: int = 2
    student_center_jitter_sigma: float = 0.008
    student_scale_jitter_sigma: float = 0.08
    student_calibration: ConfidenceCalibration = field(
        default_factory=lambda: ConfidenceCalibration(intercept=0.1, slope=0.75, sd=0.05)
    )
    gt_alloc_fraction: float = 0.7
    view_noise_weak: float = 0.05
    view_noise_strong: float = 0.25

    def __post_init__(self) -> None:
        if not 0.0 <= self.class_flip_prob <= 1.0:
            raise ValueError(f"class_flip_prob must be in [0, 1], got {self.class_flip_prob}")
        for name in ("center_jitter_sigma", "scale_jitter_sigma", "false_positive_rate",
                     "student_center_jitter_sigma", "student_scale_jitter_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.dets_per_gt < 1:
            raise ValueError(f"dets_per_gt must be >= 1, got {self.dets_per_gt}")
        if not 0.0 <= self.gt_alloc_fraction <= 1.0:
            raise ValueError(f"gt_alloc_fraction must be in [0, 1], got {self.gt_alloc_fraction}")


@dataclass(frozen=True)
class Scenario:
    """Full description of a synthetic dataset; identical scenarios generate identical data."""

    seed: int = 0
    num_images: int = 200
    boxes_per_image: tuple[int, int] = (1, 6)
    num_classes: int = 20
    noise: NoiseModel = field(default_factory=NoiseModel)
    proposals_per_image: int = 64
    grid_channels: int = 8
    grid_height: int = 12
    grid_width: int = 12

    def __post_init__(self) -> None:
        lo, hi = self.boxes_per_image
        if self.num_images < 1 or self.num_classes < 1 or self.proposals_per_image < 1:
            raise ValueError("counts must be positive")
        if lo < 1 or hi < lo:
            raise ValueError(f"bad boxes_per_image range: {self.boxes_per_image}")


@dataclass
class SyntheticImage:
    index: int
    gt_boxes: list[Box]
    gt_classes: list[int]
    teacher_dets: list[Detection]
    teacher_src: list[int | None]
    student_props: list[Detection]
    student_src: list[int | None]
    grid_teacher: FeatureGrid
    grid_student: FeatureGrid


@dataclass
class SyntheticDataset:
    scenario: Scenario
    images: list[SyntheticImage]


def _sample_box(rng: np.random.Generator) -> Box:
    w = float(np.exp(rng.uniform(math.log(0.05), math.log(0.4))))
    h = float(np.exp(rng.uniform(math.log(0.05), math.log(0.4))))
    cx = float(rng.uniform(w / 2.0, 1.0 - w / 2.0))
    cy = float(rng.uniform(h / 2.0, 1.0 - h / 2.0))
    return Box.from_center_form(cx, cy, w, h)


def _jitter_box(
    rng: np.random.Generator, box: Box, center_sigma: float, scale_sigma: float
) -> Box:
    cx, cy, w, h = box.to_center_form()
    cx += float(rng.normal(0.0, center_sigma))
    cy += float(rng.normal(0.0, center_sigma))
    w *= float(np.exp(rng.normal(0.0, scale_sigma)))
    h *= float(np.exp(rng.normal(0.0, scale_sigma)))
    x_min = min(max(cx - w / 2.0, 0.0), 1.0)
    y_min = min(max(cy - h / 2.0, 0.0), 1.0)
    x_max = min(max(cx + w / 2.0, x_min), 1.0)
    y_max = min(max(cy + h / 2.0, y_min), 1.0)
    return Box(x_min, y_min, x_max, y_max)


def _score_vector(
    rng: np.random.Generator, num_classes: int, class_id: int, score: float
) -> np.ndarray:
    scores = rng.uniform(0.0, 0.5 * score, size=num_classes)
    scores[class_id] = score
    return scores


def _make_detection(
    rng: np.random.Generator,
    scn: Scenario,
    box: Box,
    class_id: int,
    iou_to_source: float,
    calibration: ConfidenceCalibration,
) -> Detection:
    noise = scn.noise
    score = calibration.sample(rng, iou_to_source)
    if noise.class_flip_prob > 0 and rng.random() < noise.class_flip_prob and scn.num_classes > 1:
        others = [c for c in range(scn.num_classes) if c != class_id]
        class_id = int(others[rng.integers(len(others))])
    return Detection(box, _score_vector(rng, scn.num_classes, class_id, score))


def _allocate_counts(rng: np.random.Generator, total: int, n_groups: int) -> list[int]:
    """Skewed integer split of ``total`` over groups (query-like clustering)."""
    if n_groups == 0 or total == 0:
        return [0] * n_groups
    weights = rng.dirichlet(np.full(n_groups, 0.5))
    counts = np.floor(weights * total).astype(int)
    remainder = total - int(counts.sum())
    frac = weights * total - np.floor(weights * total)
    for idx in sorted(range(n_groups), key=lambda g: (-frac[g], g))[:remainder]:
        counts[idx] += 1
    return counts.tolist()


def _generate_image(scn: Scenario, index: int) -> SyntheticImage:
    rng = np.random.default_rng([scn.seed, index])
    noise = scn.noise
    lo, hi = scn.boxes_per_image
    n_gt = int(rng.integers(lo, hi + 1))
    gt_boxes = [_sample_box(rng) for _ in range(n_gt)]
    gt_classes = [int(rng.integers(scn.num_classes)) for _ in range(n_gt)]

    teacher_dets: list[Detection] = []
    teacher_src: list[int | None] = []
    for g, gbox in enumerate(gt_boxes):
        for _ in range(noise.dets_per_gt):
            if noise.center_jitter_sigma == 0 and noise.scale_jitter_sigma == 0:
                dbox, u = gbox, 1.0
            else:
                dbox = _jitter_box(rng, gbox, noise.center_jitter_sigma, noise.scale_jitter_sigma)
                u = iou(dbox, gbox)
            teacher_dets.append(_make_detection(rng, scn, dbox, gt_classes[g], u, noise.confidence_calibration))
            teacher_src.append(g)
    n_fp = int(rng.poisson(noise.false_positive_rate))
    for _ in range(n_fp):
        fbox = _sample_box(rng)
        teacher_dets.append(
            _make_detection(rng, scn, fbox, int(rng.integers(scn.num_classes)), 0.0,
                            noise.confidence_calibration)
        )
        teacher_src.append(None)

    student_props: list[Detection] = []
    student_src: list[int | None] = []
    n_alloc = int(round(noise.gt_alloc_fraction * scn.proposals_per_image))
    counts = _allocate_counts(rng, n_alloc, n_gt)
    for g, count in enumerate(counts):
        for _ in range(count):
            pbox = _jitter_box(
                rng, gt_boxes[g], noise.student_center_jitter_sigma,
                noise.student_scale_jitter_sigma,
            )
            u = iou(pbox, gt_boxes[g])
            student_props.append(
                _make_detection(rng, scn, pbox, gt_classes[g], u, noise.student_calibration)
            )
            student_src.append(g)
    for _ in range(scn.proposals_per_image - len(student_props)):
        pbox = _sample_box(rng)
        student_props.append(
            _make_detection(rng, scn, pbox, int(rng.integers(scn.num_classes)), 0.0,
                            noise.student_calibration)
        )
        student_src.append(None)

    base = rng.normal(size=(scn.grid_channels, scn.grid_height, scn.grid_width))
    grid_teacher = FeatureGrid(base + noise.view_noise_weak * rng.normal(size=base.shape))
    grid_student = FeatureGrid(base + noise.view_noise_strong * rng.normal(size=base.shape))
    return SyntheticImage(
        index=index,
        gt_boxes=gt_boxes,
        gt_classes=gt_classes,
        teacher_dets=teacher_dets,
        teacher_src=teacher_src,
        student_props=student_props,
        student_src=student_src,
        grid_teacher=grid_teacher,
        grid_student=grid_student,
    )


def generate(scn: Scenario) -> SyntheticDataset:
    """Materialize the scenario: deterministic in the seed, image-parallel safe."""
    images = parallel_map(lambda i: _generate_image(scn, i), range(scn.num_images))
    return SyntheticDataset(scn, images)


def match_precision_recall(
    kept_per_image: list[list[PseudoLabel]],
    images: list[SyntheticImage],
    iou_thresh: float = 0.5,
) -> tuple[float, float, int, int]:
    """Greedy confidence-ordered matching of kept labels to hidden truth.

    A kept label is a true positive when it overlaps an unmatched
    same-class ground-truth box at IoU >= ``iou_thresh``; each truth box
    matches at most once. Empty kept sets report precision 1 by convention.
    Returns (precision, recall, kept_count, true_positives).
    """
    tp = 0
    kept_count = 0
    total_gt = sum(len(img.gt_boxes) for img in images)
    for kept, img in zip(kept_per_image, images):
        kept_count += len(kept)
        matched = [False] * len(img.gt_boxes)
        for label in sorted(kept, key=lambda p: -p.confidence):
            best_g, best_iou = -1, 0.0
            for g, gbox in enumerate(img.gt_boxes):
                if matched[g] or img.gt_classes[g] != label.class_id:
                    continue
                u = iou(label.box, gbox)
                if u > best_iou:
                    best_g, best_iou = g, u
            if best_g >= 0 and best_iou >= iou_thresh:
                matched[best_g] = True
                tp += 1
    precision = tp / kept_count if kept_count else 1.0
    recall = tp / total_gt if total_gt else 0.0
    return precision, recall, kept_count, tp


def _teacher_pseudo_source(
    img: SyntheticImage, nms_iou: float, nms_class_wise: bool
) -> tuple[list[Detection], list[int | None]]:
    """Teacher detections after NMS, with their ground-truth provenance carried along."""
    src_of = {id(d): s for d, s in zip(img.teacher_dets, img.teacher_src)}
    kept = nms(img.teacher_dets, nms_iou, nms_class_wise)
    return kept, [src_of[id(d)] for d in kept]


def eval_filtering(
    dataset: SyntheticDataset,
    tau_s: float = 0.4,
    topk_k: int = 9,
    w: CostWeights = CostWeights(),
    em_config: EmConfig = EmConfig(),
    gmm_batch_size: int = 8,
    nms_iou: float = 0.7,
    nms_class_wise: bool = True,
) -> EvalReport:
    """Precision/recall of the four pseudo-label selection strategies."""
    images = dataset.images
    dets = [
        pair[0]
        for pair in parallel_map(
            lambda img: _teacher_pseudo_source(img, nms_iou, nms_class_wise), images
        )
    ]

    rows: list[EvalRow] = []

    def add_row(name: str, kept_per_image: list[list[PseudoLabel]], extra: dict | None = None):
        precision, recall, kept, tp = match_precision_recall(kept_per_image, images)
        values: dict[str, float | int] = {
            "precision": precision,
            "recall": recall,
            "kept": kept,
            "true_positives": tp,
        }
        if extra:
            values.update(extra)
        rows.append(EvalRow(name, values))

    add_row(f"Fixed({format(tau_s, 'g')})", [filter_fixed(d, tau_s) for d in dets])
    add_row(f"Top-K(K={topk_k})", [filter_topk(d, topk_k) for d in dets])
    initial = [filter_mean_std(d) for d in dets]
    add_row("Mean+Std", initial)

    mined: list[list[PseudoLabel]] = []
    degenerate_batches = 0
    dropped = 0
    for start in range(0, len(images), gmm_batch_size):
        chunk = slice(start, start + gmm_batch_size)
        kept, diag = mine_cost_based(
            initial[chunk], [img.student_props for img in images[chunk]], w, em_config
        )
        mined.extend(kept)
        degenerate_batches += int(diag.degenerate_fit)
        dropped += diag.dropped_no_proposals
    add_row(
        "Cost-based GMM",
        mined,
        {"degenerate_batches": degenerate_batches, "dropped_no_proposals": dropped},
    )
    return EvalReport("filtering", rows)


def eval_assignment_quality(
    dataset: SyntheticDataset,
    k: int = 13,
    w: CostWeights = CostWeights(),
    params: MatchScoreParams = MatchScoreParams(),
    tau_s: float = 0.4,
    nms_iou: float = 0.7,
    nms_class_wise: bool = True,
) -> EvalReport:
    """Quality of assigned proposals under noisy pseudo boxes vs. true boxes.

    For each pseudo box with a known source object, ``i1`` compares the
    proposal it wins under one-to-one matching against the proposal its true
    box wins; ``i2`` is the best such overlap achieved by any member of its
    top-k one-to-many set. Conflict resolution is left off so growing k
    only ever widens each set.
    """

    def per_image(img: SyntheticImage) -> tuple[list[float], list[float]]:
        source_dets, source_src = _teacher_pseudo_source(img, nms_iou, nms_class_wise)
        pseudo = filter_fixed(source_dets, tau_s)
        pseudo = [p for p in pseudo if source_src[p.source_index] is not None]
        if not pseudo or not img.gt_boxes:
            return [], []
        props = img.student_props
        if len(props) < max(len(pseudo), len(img.gt_boxes)):
            return [], []
        gt_targets = [
            PseudoLabel(b, c, 1.0) for b, c in zip(img.gt_boxes, img.gt_classes)
        ]
        assn_pd = hungarian(build_cost_matrix(pseudo, props, w))
        assn_gt = hungarian(build_cost_matrix(gt_targets, props, w))
        o2m = one_to_many(pseudo, props, params, k, resolve_conflicts=False)
        i1s, i2s = [], []
        for i, label in enumerate(pseudo):
            g = source_src[label.source_index]
            j_pd = assn_pd.per_target[i][0]
            j_gt = assn_gt.per_target[g][0]
            i1s.append(iou(props[j_pd].box, props[j_gt].box))
            i2s.append(max(iou(props[j].box, props[j_gt].box) for j in o2m.per_target[i]))
        return i1s, i2s

    results = parallel_map(per_image, dataset.images)
    i1 = [v for i1s, _ in results for v in i1s]
    i2 = [v for _, i2s in results for v in i2s]
    n = len(i1)
    row = EvalRow(
        f"o2m(k={k})",
        {
            "mean_i1": float(np.mean(i1)) if n else 0.0,
            "mean_i2": float(np.mean(i2)) if n else 0.0,
            "frac_i2_ge_i1": float(np.mean([b >= a for a, b in zip(i1, i2)])) if n else 0.0,
            "count": n,
        },
    )
    return EvalReport("assignment_quality", [row])


def eval_strategy_ablation(
    dataset: SyntheticDataset,
    k: int = 13,
    w: CostWeights = CostWeights(),
    params: MatchScoreParams = MatchScoreParams(),
    tau_s: float = 0.4,
    max_iou_thresh: float = 0.5,
    atss_candidate_k: int = 9,
    nms_iou: float = 0.7,
    nms_class_wise: bool = True,
) -> EvalReport:
    """Positive-sample statistics of the four one-to-many assignment rules."""
    strategies = ["Max-IoU", "ATSS", "SimOTA", "Ranked Top-K"]
    sums = {
        name: {"targets": 0, "zero": 0, "positives": 0, "iou_sum": 0.0} for name in strategies
    }

    def per_image(img: SyntheticImage):
        pseudo = filter_fixed(_teacher_pseudo_source(img, nms_iou, nms_class_wise)[0], tau_s)
        props = img.student_props
        if not pseudo or not props:
            return None
        ious = pairwise_iou([p.box for p in pseudo], [p.box for p in props])
        out = {}
        assignments = {
            "Max-IoU": max_iou_assign(pseudo, props, max_iou_thresh),
            "ATSS": atss_assign(pseudo, props, atss_candidate_k),
            "SimOTA": simota_assign(pseudo, props, w),
            "Ranked Top-K": one_to_many(pseudo, props, params, k),
        }
        for name, assn in assignments.items():
            pos = sum(len(js) for js in assn.per_target)
            zero = sum(1 for js in assn.per_target if not js)
            iou_sum = sum(ious[i, j] for i, js in enumerate(assn.per_target) for j in js)
            out[name] = (len(pseudo), zero, pos, iou_sum)
        return out

    for result in parallel_map(per_image, dataset.images):
        if result is None:
            continue
        for name, (targets, zero, pos, iou_sum) in result.items():
            sums[name]["targets"] += targets
            sums[name]["zero"] += zero
            sums[name]["positives"] += pos
            sums[name]["iou_sum"] += iou_sum

    rows = []
    for name in strategies:
        s = sums[name]
        rows.append(
            EvalRow(
                name,
                {
                    "targets": s["targets"],
                    "mean_positives_per_target": s["positives"] / s["targets"] if s["targets"] else 0.0,
                    "frac_targets_zero_positives": s["zero"] / s["targets"] if s["targets"] else 0.0,
                    "mean_positive_iou": s["iou_sum"] / s["positives"] if s["positives"] else 0.0,
                },
            )
        )
    return EvalReport("strategy_ablation", rows)
