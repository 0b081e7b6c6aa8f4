"""Run configuration: parsing, validation, defaults, and echoing.

Configs are nested YAML key-value files. Every key is optional (defaults
carry the documented hyperparameters), unknown keys are rejected by full
path, and out-of-range values fail with the offending key named. The full
effective config is echoed into every report so a run can be reproduced
from its output alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .cost import CostWeights, MatchScoreParams
from .mining import EmConfig
from .pipeline import PipelineConfig, StageConfig
from .simulator import ConfidenceCalibration, NoiseModel, Scenario

__all__ = [
    "ConfigError",
    "AssignSettings",
    "MiningSettings",
    "PipelineSettings",
    "OutputSettings",
    "RunConfig",
    "load_config",
    "parse_config",
    "config_to_dict",
    "save_config",
]


class ConfigError(ValueError):
    """Configuration problem, message prefixed with the offending key path."""


@dataclass(frozen=True)
class AssignSettings:
    k: int = 13
    atss_candidate_k: int = 9
    max_iou_pos_thresh: float = 0.5
    resolve_conflicts: bool = True

    def __post_init__(self) -> None:
        if self.k < 1 or self.atss_candidate_k < 1:
            raise ValueError(f"k values must be >= 1: k={self.k}, atss={self.atss_candidate_k}")
        if not 0.0 <= self.max_iou_pos_thresh <= 1.0:
            raise ValueError(f"max_iou_pos_thresh must be in [0, 1], got {self.max_iou_pos_thresh}")


@dataclass(frozen=True)
class MiningSettings:
    topk_k: int = 9
    gmm_batch_size: int = 8
    nms_iou: float = 0.7
    nms_class_wise: bool = True
    em: EmConfig = field(default_factory=EmConfig)

    def __post_init__(self) -> None:
        if self.topk_k < 1 or self.gmm_batch_size < 1:
            raise ValueError("topk_k and gmm_batch_size must be >= 1")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ValueError(f"nms_iou must be in (0, 1], got {self.nms_iou}")


@dataclass(frozen=True)
class PipelineSettings:
    labeled_per_batch: int = 1
    unlabeled_per_batch: int = 4
    o2m_gamma: float = 2.0
    roi_out: int = 7
    roi_sampling: int = 2
    decoder_dim: int = 16
    decoder_heads: int = 2
    num_matching_queries: int = 4
    param_dim: int = 8

    def __post_init__(self) -> None:
        for name in ("labeled_per_batch", "unlabeled_per_batch", "roi_out", "roi_sampling",
                     "decoder_dim", "decoder_heads", "num_matching_queries", "param_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.o2m_gamma < 0:
            raise ValueError(f"o2m_gamma must be >= 0, got {self.o2m_gamma}")


@dataclass(frozen=True)
class OutputSettings:
    out_dir: str = "."
    format: str = "csv"

    def __post_init__(self) -> None:
        if self.format not in ("csv", "json"):
            raise ValueError(f"format must be csv or json, got {self.format!r}")


@dataclass(frozen=True)
class RunConfig:
    scenario: Scenario = field(default_factory=Scenario)
    stage: StageConfig = field(default_factory=StageConfig)
    cost: CostWeights = field(default_factory=CostWeights)
    match: MatchScoreParams = field(default_factory=MatchScoreParams)
    assign: AssignSettings = field(default_factory=AssignSettings)
    mining: MiningSettings = field(default_factory=MiningSettings)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    output: OutputSettings = field(default_factory=OutputSettings)

    def pipeline_config(self) -> PipelineConfig:
        """Bundle the step-level knobs the pipeline consumes."""
        return PipelineConfig(
            cost=self.cost,
            match=self.match,
            o2m_k=self.assign.k,
            o2m_gamma=self.pipeline.o2m_gamma,
            em=self.mining.em,
            nms_iou=self.mining.nms_iou,
            nms_class_wise=self.mining.nms_class_wise,
            roi_out=self.pipeline.roi_out,
            roi_sampling=self.pipeline.roi_sampling,
            decoder_dim=self.pipeline.decoder_dim,
            decoder_heads=self.pipeline.decoder_heads,
            num_matching_queries=self.pipeline.num_matching_queries,
            param_dim=self.pipeline.param_dim,
        )


def _check_keys(path: str, data: dict, known: tuple[str, ...]) -> None:
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key: {path}.{key}" if path else f"unknown key: {key}")


def _section(data: dict, path: str, known: tuple[str, ...], builder, **extra):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    _check_keys(path, data, known)
    try:
        return builder(**data, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(data: dict | None) -> RunConfig:
    """Build a validated RunConfig from a nested dict (all keys optional)."""
    data = dict(data or {})
    _check_keys(
        "", data,
        ("scenario", "stage", "cost", "match", "assign", "mining", "pipeline", "output"),
    )

    scenario_data = dict(data.get("scenario") or {})
    noise_data = dict(scenario_data.pop("noise", None) or {})
    calib_data = dict(noise_data.pop("confidence_calibration", None) or {})
    calibration = _section(
        calib_data, "scenario.noise.confidence_calibration",
        ("intercept", "slope", "sd"), ConfidenceCalibration,
    )
    noise = _section(
        noise_data, "scenario.noise",
        ("center_jitter_sigma", "scale_jitter_sigma", "false_positive_rate", "class_flip_prob",
         "dets_per_gt", "student_center_jitter_sigma", "student_scale_jitter_sigma",
         "gt_alloc_fraction", "view_noise_weak", "view_noise_strong"),
        NoiseModel, confidence_calibration=calibration,
    )
    if "boxes_per_image" in scenario_data:
        value = scenario_data["boxes_per_image"]
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise ConfigError("scenario.boxes_per_image: expected a [min, max] pair")
        scenario_data["boxes_per_image"] = (int(value[0]), int(value[1]))
    scenario = _section(
        scenario_data, "scenario",
        ("seed", "num_images", "boxes_per_image", "num_classes", "proposals_per_image",
         "grid_channels", "grid_height", "grid_width"),
        Scenario, noise=noise,
    )

    stage = _section(
        dict(data.get("stage") or {}), "stage",
        ("t1", "total_iters", "tau_s", "w_u", "w_c", "ema_momentum"), StageConfig,
    )
    cost = _section(
        dict(data.get("cost") or {}), "cost",
        ("lambda_cls", "lambda_giou", "lambda_l1", "focal_alpha", "focal_gamma"), CostWeights,
    )
    match = _section(dict(data.get("match") or {}), "match", ("alpha", "beta"), MatchScoreParams)
    assign = _section(
        dict(data.get("assign") or {}), "assign",
        ("k", "atss_candidate_k", "max_iou_pos_thresh", "resolve_conflicts"), AssignSettings,
    )
    mining_data = dict(data.get("mining") or {})
    em_data = dict(mining_data.pop("em", None) or {})
    em = _section(
        em_data, "mining.em",
        ("max_iters", "tol", "sigma_floor_scale", "n_restarts", "restart_seed"), EmConfig,
    )
    mining = _section(
        mining_data, "mining",
        ("topk_k", "gmm_batch_size", "nms_iou", "nms_class_wise"), MiningSettings, em=em,
    )
    pipeline = _section(
        dict(data.get("pipeline") or {}), "pipeline",
        ("labeled_per_batch", "unlabeled_per_batch", "o2m_gamma", "roi_out", "roi_sampling",
         "decoder_dim", "decoder_heads", "num_matching_queries", "param_dim"),
        PipelineSettings,
    )
    output = _section(
        dict(data.get("output") or {}), "output", ("out_dir", "format"), OutputSettings,
    )
    return RunConfig(scenario, stage, cost, match, assign, mining, pipeline, output)


def load_config(path: str | Path) -> RunConfig:
    """Read and validate a YAML config file; an empty file means all defaults."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)


def config_to_dict(cfg: RunConfig) -> dict:
    """Full effective configuration as plain nested dicts (the echo)."""
    noise = cfg.scenario.noise
    return {
        "scenario": {
            "seed": cfg.scenario.seed,
            "num_images": cfg.scenario.num_images,
            "boxes_per_image": list(cfg.scenario.boxes_per_image),
            "num_classes": cfg.scenario.num_classes,
            "proposals_per_image": cfg.scenario.proposals_per_image,
            "grid_channels": cfg.scenario.grid_channels,
            "grid_height": cfg.scenario.grid_height,
            "grid_width": cfg.scenario.grid_width,
            "noise": {
                "center_jitter_sigma": noise.center_jitter_sigma,
                "scale_jitter_sigma": noise.scale_jitter_sigma,
                "false_positive_rate": noise.false_positive_rate,
                "class_flip_prob": noise.class_flip_prob,
                "dets_per_gt": noise.dets_per_gt,
                "student_center_jitter_sigma": noise.student_center_jitter_sigma,
                "student_scale_jitter_sigma": noise.student_scale_jitter_sigma,
                "gt_alloc_fraction": noise.gt_alloc_fraction,
                "view_noise_weak": noise.view_noise_weak,
                "view_noise_strong": noise.view_noise_strong,
                "confidence_calibration": {
                    "intercept": noise.confidence_calibration.intercept,
                    "slope": noise.confidence_calibration.slope,
                    "sd": noise.confidence_calibration.sd,
                },
            },
        },
        "stage": {
            "t1": cfg.stage.t1,
            "total_iters": cfg.stage.total_iters,
            "tau_s": cfg.stage.tau_s,
            "w_u": cfg.stage.w_u,
            "w_c": cfg.stage.w_c,
            "ema_momentum": cfg.stage.ema_momentum,
        },
        "cost": {
            "lambda_cls": cfg.cost.lambda_cls,
            "lambda_giou": cfg.cost.lambda_giou,
            "lambda_l1": cfg.cost.lambda_l1,
            "focal_alpha": cfg.cost.focal_alpha,
            "focal_gamma": cfg.cost.focal_gamma,
        },
        "match": {"alpha": cfg.match.alpha, "beta": cfg.match.beta},
        "assign": {
            "k": cfg.assign.k,
            "atss_candidate_k": cfg.assign.atss_candidate_k,
            "max_iou_pos_thresh": cfg.assign.max_iou_pos_thresh,
            "resolve_conflicts": cfg.assign.resolve_conflicts,
        },
        "mining": {
            "topk_k": cfg.mining.topk_k,
            "gmm_batch_size": cfg.mining.gmm_batch_size,
            "nms_iou": cfg.mining.nms_iou,
            "nms_class_wise": cfg.mining.nms_class_wise,
            "em": {
                "max_iters": cfg.mining.em.max_iters,
                "tol": cfg.mining.em.tol,
                "sigma_floor_scale": cfg.mining.em.sigma_floor_scale,
                "n_restarts": cfg.mining.em.n_restarts,
                "restart_seed": cfg.mining.em.restart_seed,
            },
        },
        "pipeline": {
            "labeled_per_batch": cfg.pipeline.labeled_per_batch,
            "unlabeled_per_batch": cfg.pipeline.unlabeled_per_batch,
            "o2m_gamma": cfg.pipeline.o2m_gamma,
            "roi_out": cfg.pipeline.roi_out,
            "roi_sampling": cfg.pipeline.roi_sampling,
            "decoder_dim": cfg.pipeline.decoder_dim,
            "decoder_heads": cfg.pipeline.decoder_heads,
            "num_matching_queries": cfg.pipeline.num_matching_queries,
            "param_dim": cfg.pipeline.param_dim,
        },
        "output": {"out_dir": cfg.output.out_dir, "format": cfg.output.format},
    }


def save_config(cfg: RunConfig, path: str | Path) -> Path:
    """Write the effective config as YAML; loading it back reproduces ``cfg``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))
    return path
