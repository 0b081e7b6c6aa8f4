"""Command-line surface: simulate, mine, assign, check.

Exit codes: 0 success, 1 validation failure (bad config, bad records,
unknown usage), 2 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import traceback
from pathlib import Path

from . import simulator
from .assignment import (
    InfeasibleAssignmentError,
    atss_assign,
    hungarian,
    max_iou_assign,
    one_to_many,
    simota_assign,
)
from .config import ConfigError, RunConfig, config_to_dict, load_config, save_config
from .cost import build_cost_matrix
from .geometry import pairwise_iou
from .mining import (
    DegenerateFitError,
    PseudoLabel,
    filter_fixed,
    filter_mean_std,
    filter_topk,
    mine_cost_based,
)
from .pipeline import StageConfig, run_pipeline
from .records import RecordError, emit_pseudo_labels, ingest_ground_truth, ingest_predictions
from .reports import EvalReport, EvalRow, emit_report
from .selfcheck import run_checks

__all__ = ["cli_main", "main"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssodkit",
        description="Desk-scale pseudo-label assignment, mining, and consistency toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a synthetic scenario and emit reports")
    sim.add_argument("--config", type=str, default=None, help="YAML config path")
    sim.add_argument("--seed", type=int, default=None, help="override scenario seed")
    sim.add_argument("--out", type=str, default=None, help="output directory")
    sim.add_argument("--format", choices=("csv", "json"), default=None)

    mine = sub.add_parser("mine", help="filter an external prediction dump into pseudo labels")
    mine.add_argument("--input", type=str, required=True, help="predictions .jsonl")
    mine.add_argument(
        "--strategy", choices=("fixed", "topk", "meanstd", "gmm"), default="fixed"
    )
    mine.add_argument("--proposals", type=str, default=None,
                      help="optional second dump matched against for the gmm strategy")
    mine.add_argument("--config", type=str, default=None)
    mine.add_argument("--out", type=str, default=None)
    mine.add_argument("--strict", action="store_true", help="abort on the first bad record")

    assign = sub.add_parser("assign", help="assignment diagnostics for predictions vs. targets")
    assign.add_argument("--input", type=str, required=True, help="proposal dump .jsonl")
    assign.add_argument("--gt", type=str, required=True, help="target dump .jsonl")
    assign.add_argument(
        "--strategy",
        choices=("hungarian", "o2m", "maxiou", "atss", "simota"),
        default="hungarian",
    )
    assign.add_argument("--config", type=str, default=None)
    assign.add_argument("--out", type=str, default=None)
    assign.add_argument("--format", choices=("csv", "json"), default=None)
    assign.add_argument("--strict", action="store_true")

    check = sub.add_parser("check", help="run the built-in oracle and property suite")
    check.add_argument("--seed", type=int, default=0)
    return parser


def _load_run_config(path: str | None) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _cmd_simulate(args) -> int:
    cfg = _load_run_config(args.config)
    scenario = cfg.scenario
    if args.seed is not None:
        scenario = dataclasses.replace(scenario, seed=args.seed)
        cfg = dataclasses.replace(cfg, scenario=scenario)
    out_dir = Path(args.out or cfg.output.out_dir)
    fmt = args.format or cfg.output.format
    echo = config_to_dict(cfg)

    dataset = simulator.generate(scenario)
    filtering = simulator.eval_filtering(
        dataset,
        tau_s=cfg.stage.tau_s,
        topk_k=cfg.mining.topk_k,
        w=cfg.cost,
        em_config=cfg.mining.em,
        gmm_batch_size=cfg.mining.gmm_batch_size,
        nms_iou=cfg.mining.nms_iou,
        nms_class_wise=cfg.mining.nms_class_wise,
    )
    quality = simulator.eval_assignment_quality(
        dataset, k=cfg.assign.k, w=cfg.cost, params=cfg.match, tau_s=cfg.stage.tau_s,
        nms_iou=cfg.mining.nms_iou, nms_class_wise=cfg.mining.nms_class_wise,
    )
    ablation = simulator.eval_strategy_ablation(
        dataset, k=cfg.assign.k, w=cfg.cost, params=cfg.match, tau_s=cfg.stage.tau_s,
        max_iou_thresh=cfg.assign.max_iou_pos_thresh,
        atss_candidate_k=cfg.assign.atss_candidate_k,
        nms_iou=cfg.mining.nms_iou, nms_class_wise=cfg.mining.nms_class_wise,
    )
    steps = run_pipeline(
        dataset, cfg.stage, cfg.pipeline_config(),
        labeled_per_batch=cfg.pipeline.labeled_per_batch,
        unlabeled_per_batch=cfg.pipeline.unlabeled_per_batch,
    )
    trace_rows = []
    for result in steps:
        d = result.diagnostics
        trace_rows.append(
            EvalRow(
                f"t={d['t']}",
                {
                    "stage": d["stage"],
                    "total": d["total"],
                    "sup_cls": d["sup_cls"],
                    "unsup_cls": d["unsup_cls"],
                    "consistency": d["consistency"],
                    "pseudo_fixed": d["pseudo_fixed"],
                    "pseudo_mined": d["pseudo_mined"],
                    "ema_distance": d["ema_distance"],
                },
            )
        )
    trace = EvalReport("pipeline_trace", trace_rows)

    for report in (filtering, quality, ablation, trace):
        report.config_echo = echo
        path = emit_report(report, out_dir / f"{report.title}.{fmt}", fmt)
        print(f"wrote {path}")
    save_config(cfg, out_dir / "effective_config.yaml")
    print(f"wrote {out_dir / 'effective_config.yaml'}")
    return 0


def _cmd_mine(args) -> int:
    cfg = _load_run_config(args.config)
    result = ingest_predictions(args.input, strict=args.strict)
    if args.proposals:
        proposal_result = ingest_predictions(args.proposals, strict=args.strict)
        proposal_groups = proposal_result.groups
    else:
        proposal_groups = result.groups

    kept: dict[str, list] = {}
    if args.strategy == "fixed":
        for image_id, dets in result.groups.items():
            kept[image_id] = filter_fixed(dets, cfg.stage.tau_s)
    elif args.strategy == "topk":
        for image_id, dets in result.groups.items():
            kept[image_id] = filter_topk(dets, cfg.mining.topk_k)
    elif args.strategy == "meanstd":
        for image_id, dets in result.groups.items():
            kept[image_id] = filter_mean_std(dets)
    else:  # gmm
        image_ids = list(result.groups)
        initial = [filter_mean_std(result.groups[i]) for i in image_ids]
        proposals = [proposal_groups.get(i, []) for i in image_ids]
        mined, diag = mine_cost_based(initial, proposals, cfg.cost, cfg.mining.em)
        kept = dict(zip(image_ids, mined))
        print(
            f"gmm: initial={diag.total_initial} kept={diag.kept} "
            f"dropped_no_proposals={diag.dropped_no_proposals} degenerate={diag.degenerate_fit}"
        )

    out = Path(args.out or "pseudo_labels.jsonl")
    emit_pseudo_labels(kept, result.meta, out)
    total_kept = sum(len(v) for v in kept.values())
    print(f"kept {total_kept}/{result.kept} detections -> {out}")
    if result.skipped:
        print(f"skipped {result.skipped} bad records")
    return 0


def _cmd_assign(args) -> int:
    cfg = _load_run_config(args.config)
    preds = ingest_predictions(args.input, strict=args.strict)
    gts = ingest_ground_truth(args.gt, strict=args.strict)
    rows = []
    for image_id, targets in gts.groups.items():
        proposals = preds.groups.get(image_id, [])
        if not proposals:
            rows.append(EvalRow(image_id, {"targets": len(targets), "positives": 0, "note": "no proposals"}))
            continue
        target_labels = [PseudoLabel(t.box, t.class_id, t.score) for t in targets]
        if args.strategy == "hungarian":
            assn = hungarian(build_cost_matrix(target_labels, proposals, cfg.cost))
        elif args.strategy == "o2m":
            assn = one_to_many(target_labels, proposals, cfg.match, cfg.assign.k,
                               cfg.assign.resolve_conflicts)
        elif args.strategy == "maxiou":
            assn = max_iou_assign(target_labels, proposals, cfg.assign.max_iou_pos_thresh)
        elif args.strategy == "atss":
            assn = atss_assign(target_labels, proposals, cfg.assign.atss_candidate_k)
        else:
            assn = simota_assign(target_labels, proposals, cfg.cost)
        ious = pairwise_iou([t.box for t in targets], [p.box for p in proposals])
        positives = sum(len(js) for js in assn.per_target)
        iou_sum = sum(ious[i, j] for i, js in enumerate(assn.per_target) for j in js)
        rows.append(
            EvalRow(
                image_id,
                {
                    "targets": len(targets),
                    "proposals": len(proposals),
                    "positives": positives,
                    "mean_positive_iou": iou_sum / positives if positives else 0.0,
                    "targets_without_positive": sum(1 for js in assn.per_target if not js),
                },
            )
        )
    report = EvalReport(f"assign_{args.strategy}", rows, config_to_dict(cfg))
    fmt = args.format or cfg.output.format
    out = Path(args.out or f"assign_{args.strategy}.{fmt}")
    emit_report(report, out, fmt)
    print(f"wrote {out}")
    return 0


def _cmd_check(args) -> int:
    results = run_checks(args.seed)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} checks passed")
    return 0 if passed == len(results) else 1


def cli_main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse prints usage itself; fold its exit code into ours.
        return 0 if exc.code in (0, None) else 1
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "mine":
            return _cmd_mine(args)
        if args.command == "assign":
            return _cmd_assign(args)
        return _cmd_check(args)
    except (ConfigError, RecordError, InfeasibleAssignmentError, DegenerateFitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))
