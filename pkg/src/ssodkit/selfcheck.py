"""Built-in verification suite behind the ``check`` CLI subcommand.

Runs scaled-down versions of the core correctness gates (matching
optimality, gradient agreement, mixture recovery, mask isolation, EMA
closed form, stage switching) and reports one line per check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assignment import AssignmentMode, hungarian, one_to_many
from .consistency import (
    DecoderParams,
    QueryGroup,
    QuerySet,
    build_attention_mask,
    consistency_loss,
    toy_decode,
)
from .cost import CostMatrix, CostWeights, MatchScoreParams
from .geometry import Box, Detection
from .losses import LossBreakdown, o2m_cls_loss, o2m_reg_loss, total_loss
from .mining import EmConfig, fit_gmm_1d
from .oracles import brute_force_assignment_min, finite_difference
from .pipeline import ema_update

__all__ = ["CheckResult", "run_checks"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _check_hungarian(rng: np.random.Generator, instances: int = 100) -> CheckResult:
    for _ in range(instances):
        n_t = int(rng.integers(1, 6))
        n_p = int(rng.integers(n_t, 8))
        values = rng.integers(0, 100, size=(n_t, n_p)).astype(float)
        matrix = CostMatrix(values, np.arange(n_t), np.arange(n_p))
        assn = hungarian(matrix)
        total = sum(values[i, js[0]] for i, js in enumerate(assn.per_target))
        expected = brute_force_assignment_min(values)
        if total != expected:
            return CheckResult("hungarian_optimality", False, f"{total} != {expected}")
    return CheckResult("hungarian_optimality", True, f"{instances} instances exact")


def _check_gradients(rng: np.random.Generator, instances: int = 20) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        n_pos = int(rng.integers(1, 4))
        n_neg = int(rng.integers(0, 4))
        pos = [(float(rng.uniform(0.05, 0.95)), float(rng.uniform(0.05, 0.95))) for _ in range(n_pos)]
        neg = [float(rng.uniform(0.05, 0.95)) for _ in range(n_neg)]
        _, grads = o2m_cls_loss(pos, neg)
        x0 = np.array([s for s, _ in pos] + neg)

        def cls_fn(x: np.ndarray) -> float:
            p = [(float(x[i]), pos[i][1]) for i in range(n_pos)]
            n = [float(v) for v in x[n_pos:]]
            return o2m_cls_loss(p, n)[0]

        fd = finite_difference(cls_fn, x0)
        err = np.max(np.abs(fd - grads) / np.maximum(np.abs(fd), 1e-3))
        worst = max(worst, float(err))
        if err > 1e-4:
            return CheckResult("gradient_agreement", False, f"cls rel err {err:.2e}")

        m_hat = float(rng.uniform(0.1, 1.0))
        a = Box.from_center_form(
            float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.3, 0.7)),
            float(rng.uniform(0.1, 0.4)), float(rng.uniform(0.1, 0.4)),
        )
        b = Box.from_center_form(
            float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.3, 0.7)),
            float(rng.uniform(0.1, 0.4)), float(rng.uniform(0.1, 0.4)),
        )
        _, reg_grads = o2m_reg_loss([(m_hat, a, b)])

        def reg_fn(x: np.ndarray) -> float:
            return o2m_reg_loss([(m_hat, Box.from_center_form(*x), b)])[0]

        fd = finite_difference(reg_fn, np.array(a.to_center_form()))
        err = np.max(np.abs(fd - reg_grads[0]) / np.maximum(np.abs(fd), 1e-3))
        worst = max(worst, float(err))
        if err > 1e-4:
            return CheckResult("gradient_agreement", False, f"reg rel err {err:.2e}")
    return CheckResult("gradient_agreement", True, f"worst rel err {worst:.2e}")


def _check_gmm(seeds: int = 5) -> CheckResult:
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        samples = np.concatenate([rng.normal(1.0, 0.1, 200), rng.normal(4.0, 0.5, 200)])
        fit = fit_gmm_1d(samples, EmConfig())
        if abs(fit.mu_r - 1.0) > 0.3 or abs(fit.mu_u - 4.0) > 0.3:
            return CheckResult("gmm_recovery", False, f"seed {seed}: mu=({fit.mu_r}, {fit.mu_u})")
        diffs = np.diff(fit.ll_trace)
        if np.any(diffs < -1e-9 * np.maximum(1.0, np.abs(fit.ll_trace[:-1]))):
            return CheckResult("gmm_recovery", False, f"seed {seed}: log-likelihood decreased")
    return CheckResult("gmm_recovery", True, f"{seeds} seeds recovered")


def _check_leakage(rng: np.random.Generator, configs: int = 10) -> CheckResult:
    for _ in range(configs):
        dim, heads = 8, 2
        params = DecoderParams.create(rng, dim, heads, memory_channels=5)
        n_match = int(rng.integers(1, 4))
        n_cons = int(rng.integers(1, 4))
        matching = rng.normal(size=(n_match, dim))
        cons = rng.normal(size=(n_cons, dim))
        memory = rng.normal(size=(6, 5))
        alone = toy_decode(
            QuerySet(matching, [QueryGroup.MATCHING] * n_match),
            memory,
            build_attention_mask([QueryGroup.MATCHING] * n_match),
            params,
        )
        groups = [QueryGroup.MATCHING] * n_match + [QueryGroup.CONSISTENCY] * n_cons
        both = toy_decode(
            QuerySet(np.vstack([matching, cons]), groups),
            memory,
            build_attention_mask(groups),
            params,
        )
        if not np.array_equal(alone, both[:n_match]):
            return CheckResult("mask_isolation", False, "matching outputs changed bitwise")
    return CheckResult("mask_isolation", True, f"{configs} configs bitwise identical")


def _check_ema() -> CheckResult:
    one = ema_update(np.zeros(1), np.ones(1), 0.999)
    if one[0] != 0.001:
        return CheckResult("ema_closed_form", False, f"single step gave {one[0]!r}")
    teacher = np.full(3, 2.0)
    student = np.full(3, -1.0)
    current = teacher
    for _ in range(10):
        current = ema_update(current, student, 0.999)
    expected = teacher * 0.999**10 + student * (1 - 0.999**10)
    if not np.allclose(current, expected, rtol=1e-12, atol=0):
        return CheckResult("ema_closed_form", False, "10-step blend mismatch")
    return CheckResult("ema_closed_form", True, "single and 10-step blends exact")


def _check_o2m_degeneracy(rng: np.random.Generator, instances: int = 100) -> CheckResult:
    from .cost import match_score_matrix

    params = MatchScoreParams()
    done = 0
    while done < instances:
        n_t = int(rng.integers(1, 4))
        n_p = int(rng.integers(n_t + 2, n_t + 8))
        targets = []
        proposals = []
        num_classes = 5
        for _ in range(n_t):
            box = Box.from_center_form(
                float(rng.uniform(0.25, 0.75)), float(rng.uniform(0.25, 0.75)),
                float(rng.uniform(0.1, 0.4)), float(rng.uniform(0.1, 0.4)),
            )
            targets.append(
                Detection(box, np.eye(num_classes)[int(rng.integers(num_classes))] * 0.9 + 0.05)
            )
        for _ in range(n_p):
            box = Box.from_center_form(
                float(rng.uniform(0.25, 0.75)), float(rng.uniform(0.25, 0.75)),
                float(rng.uniform(0.1, 0.4)), float(rng.uniform(0.1, 0.4)),
            )
            scores = rng.uniform(0.05, 0.95, size=num_classes)
            proposals.append(Detection(box, scores))
        m = match_score_matrix(targets, proposals, params)
        bests = [int(np.argmax(m[i])) for i in range(n_t)]
        if len(set(bests)) != n_t:
            continue
        done += 1
        o2m = one_to_many(targets, proposals, params, k=1, resolve_conflicts=True)
        hung = hungarian(CostMatrix(-m, np.arange(n_t), np.arange(n_p)))
        if o2m.per_target != hung.per_target:
            return CheckResult("o2m_k1_vs_hungarian", False, f"{o2m.per_target} != {hung.per_target}")
    return CheckResult("o2m_k1_vs_hungarian", True, f"{instances} distinct-argmax instances equal")


def _check_stage_boundary() -> CheckResult:
    sup = LossBreakdown.assemble(cls=1.0, flavor="o2m")
    unsup = LossBreakdown.assemble(cls=2.0, flavor="o2m")
    at_boundary = total_loss(4, 4, sup, unsup, 3.0, 4.0, 1.0)
    if at_boundary != 1.0 + 4.0 * 2.0 + 3.0:
        return CheckResult("stage_boundary", False, f"got {at_boundary}")
    try:
        total_loss(5, 4, sup, unsup, 0.0, 4.0, 1.0)
    except Exception:
        return CheckResult("stage_boundary", True, "boundary inclusive, flavor guard raises")
    return CheckResult("stage_boundary", False, "flavor guard did not raise after boundary")


def _check_consistency_detach(rng: np.random.Generator) -> CheckResult:
    s = rng.normal(size=(3, 4))
    t = rng.normal(size=(3, 4))
    value, grad = consistency_loss(s, t)
    if value < 0:
        return CheckResult("consistency_detach", False, "negative MSE")
    fd = finite_difference(lambda x: consistency_loss(x.reshape(3, 4), t)[0], s.reshape(-1))
    if np.max(np.abs(fd - grad.reshape(-1))) > 1e-6:
        return CheckResult("consistency_detach", False, "student gradient mismatch")
    return CheckResult("consistency_detach", True, "gradient matches, student side only")


def run_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [
        _check_hungarian(rng),
        _check_gradients(rng),
        _check_gmm(),
        _check_leakage(rng),
        _check_ema(),
        _check_o2m_degeneracy(rng),
        _check_stage_boundary(),
        _check_consistency_detach(rng),
    ]
