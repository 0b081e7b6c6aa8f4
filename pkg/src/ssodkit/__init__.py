"""Desk-scale semi-supervised detection machinery.

Bipartite and ranked label assignment, stage-switched losses with analytic
gradients, pseudo-label mining (threshold, top-k, adaptive, cost-clustered),
cross-view query consistency on a toy decoder, EMA teacher updates, and a
synthetic-scenario simulator that exercises all of it without a neural
backbone.
"""

from .assignment import (
    Assignment,
    AssignmentMode,
    InfeasibleAssignmentError,
    atss_assign,
    hungarian,
    max_iou_assign,
    one_to_many,
    simota_assign,
)
from .consistency import (
    AttentionMask,
    DecoderParams,
    FeatureGrid,
    MlpParams,
    QueryGroup,
    QuerySet,
    build_attention_mask,
    consistency_loss,
    embed_queries,
    roi_align,
    toy_decode,
)
from .cost import (
    CostMatrix,
    CostWeights,
    MatchScoreParams,
    build_cost_matrix,
    focal_cls_cost,
    match_score,
    match_score_matrix,
)
from .geometry import Box, Detection, giou, iou, l1_center_form, nms, pairwise_iou
from .losses import (
    LossBreakdown,
    NormalizedScore,
    StageFlavorError,
    normalize_match_scores,
    o2m_cls_loss,
    o2m_losses,
    o2m_reg_loss,
    o2o_losses,
    total_loss,
)
from .mining import (
    DegenerateFitError,
    EmConfig,
    GmmFit,
    PseudoLabel,
    filter_fixed,
    filter_mean_std,
    filter_topk,
    fit_gmm_1d,
    mine_cost_based,
    mining_threshold,
)
from .pipeline import (
    PipelineConfig,
    PipelineState,
    Stage,
    StageConfig,
    StepResult,
    ema_update,
    run_pipeline,
    semi_step,
    stage_of,
)
from .simulator import (
    ConfidenceCalibration,
    NoiseModel,
    Scenario,
    SyntheticDataset,
    SyntheticImage,
    eval_assignment_quality,
    eval_filtering,
    eval_strategy_ablation,
    generate,
)

__version__ = "0.1.0"
