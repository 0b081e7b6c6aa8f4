"""Pseudo-label selection strategies, from fixed thresholds to cost clustering.

The cost-based route matches each initial pseudo box to a proposal by
bipartite matching, pools the matched costs across a batch of images, fits a
two-component univariate Gaussian mixture by EM, and keeps the boxes cheaper
than the low-cost ("reliable") component's mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assignment import hungarian
from .cost import CostWeights, build_cost_matrix
from .geometry import Box, Detection

__all__ = [
    "PseudoLabel",
    "GmmFit",
    "EmConfig",
    "DegenerateFitError",
    "filter_fixed",
    "filter_topk",
    "filter_mean_std",
    "fit_gmm_1d",
    "mining_threshold",
    "mine_cost_based",
    "MiningDiagnostics",
]


@dataclass
class PseudoLabel:
    """A filtered teacher detection kept as a supervision target.

    ``match_cost`` is filled by the cost-based mining stage; ``source_index``
    points back at the detection list the label was filtered from.
    """

    box: Box
    class_id: int
    confidence: float
    match_cost: float | None = None
    source_index: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")
        if self.match_cost is not None and not math.isfinite(self.match_cost):
            raise ValueError(f"match_cost must be finite, got {self.match_cost}")


class DegenerateFitError(Exception):
    """Mixture fitting was requested on too few or zero-spread samples."""


@dataclass
class GmmFit:
    """Two-component 1-D Gaussian mixture over matching costs.

    Components are relabeled after fitting so the reliable (low-cost) one
    comes first: ``mu_r <= mu_u``. ``ll_trace`` records the log-likelihood
    after every EM iteration.
    """

    w_r: float
    w_u_mix: float
    mu_r: float
    mu_u: float
    sigma_r: float
    sigma_u: float
    log_likelihood: float
    iterations: int
    converged: bool
    ll_trace: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if abs(self.w_r + self.w_u_mix - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must sum to 1: {self.w_r} + {self.w_u_mix}")
        if self.mu_r > self.mu_u:
            raise ValueError("components must be ordered with mu_r <= mu_u")


@dataclass(frozen=True)
class EmConfig:
    """EM stopping and stabilization settings."""

    max_iters: int = 200
    tol: float = 1e-6
    sigma_floor_scale: float = 1e-4
    n_restarts: int = 0
    restart_seed: int = 0


def _to_pseudo(det: Detection, index: int) -> PseudoLabel:
    return PseudoLabel(det.box, det.class_id, det.score, source_index=index)


def filter_fixed(dets: list[Detection], tau_s: float) -> list[PseudoLabel]:
    """Keep detections scoring strictly above ``tau_s``, best first."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    return [_to_pseudo(dets[i], i) for i in order if dets[i].score > tau_s]


def filter_topk(dets: list[Detection], k: int) -> list[PseudoLabel]:
    """Keep the k highest-confidence detections (all if fewer)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    return [_to_pseudo(dets[i], i) for i in order[:k]]


def filter_mean_std(dets: list[Detection]) -> list[PseudoLabel]:
    """Keep detections scoring at least this image's mean + population std."""
    if not dets:
        return []
    scores = np.array([d.score for d in dets])
    thresh = float(scores.mean() + scores.std())
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    return [_to_pseudo(dets[i], i) for i in order if dets[i].score >= thresh]


def _gaussian_pdf(x: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    return np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))


def _em_run(
    x: np.ndarray,
    mu: np.ndarray,
    sigma: np.ndarray,
    weight: np.ndarray,
    sigma_floor: float,
    config: EmConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[float], bool]:
    ll_trace: list[float] = []
    converged = False
    for _ in range(config.max_iters):
        # E step: responsibilities of each component for each sample.
        dens = np.stack([weight[k] * _gaussian_pdf(x, mu[k], sigma[k]) for k in (0, 1)])
        dens_sum = dens.sum(axis=0)
        dens_sum = np.maximum(dens_sum, 1e-300)
        resp = dens / dens_sum
        # M step.
        mass = resp.sum(axis=1)
        mass = np.maximum(mass, 1e-300)
        weight = mass / x.size
        mu = (resp * x).sum(axis=1) / mass
        var = (resp * (x - mu[:, None]) ** 2).sum(axis=1) / mass
        sigma = np.maximum(np.sqrt(var), sigma_floor)
        dens = np.stack([weight[k] * _gaussian_pdf(x, mu[k], sigma[k]) for k in (0, 1)])
        ll = float(np.log(np.maximum(dens.sum(axis=0), 1e-300)).sum())
        ll_trace.append(ll)
        if len(ll_trace) >= 2 and ll - ll_trace[-2] < config.tol:
            converged = True
            break
    return mu, sigma, weight, ll_trace, converged


def fit_gmm_1d(costs: list[float] | np.ndarray, config: EmConfig = EmConfig()) -> GmmFit:
    """Fit a two-component mixture to 1-D cost samples by EM.

    Initialization splits the samples at the median (deterministic); extra
    seeded random restarts can be requested through the config, keeping the
    best final log-likelihood. Needs at least 4 samples with non-zero
    spread, otherwise ``DegenerateFitError``.
    """
    x = np.asarray(costs, dtype=float)
    if x.size < 4:
        raise DegenerateFitError(f"need >= 4 samples, got {x.size}")
    spread = float(x.max() - x.min())
    if spread <= 0.0:
        raise DegenerateFitError("samples have zero spread")
    sigma_floor = config.sigma_floor_scale * spread

    def initial_from_split(mask_low: np.ndarray):
        groups = [x[mask_low], x[~mask_low]]
        mu = np.array([float(g.mean()) for g in groups])
        sigma = np.array([max(float(g.std()), sigma_floor) for g in groups])
        weight = np.array([g.size / x.size for g in groups])
        return mu, sigma, weight

    median = float(np.median(x))
    low = x <= median
    if low.all() or not low.any():
        low = x < median
    runs = [initial_from_split(low)]
    rng = np.random.default_rng(config.restart_seed)
    for _ in range(config.n_restarts):
        mask = rng.random(x.size) < 0.5
        if mask.all() or not mask.any():
            continue
        runs.append(initial_from_split(mask))

    best: tuple | None = None
    for mu0, sigma0, weight0 in runs:
        mu, sigma, weight, ll_trace, converged = _em_run(
            x, mu0.copy(), sigma0.copy(), weight0.copy(), sigma_floor, config
        )
        if best is None or ll_trace[-1] > best[3][-1]:
            best = (mu, sigma, weight, ll_trace, converged)
    mu, sigma, weight, ll_trace, converged = best
    order = (0, 1) if mu[0] <= mu[1] else (1, 0)
    r, u = order
    return GmmFit(
        w_r=float(weight[r]),
        w_u_mix=float(weight[u]),
        mu_r=float(mu[r]),
        mu_u=float(mu[u]),
        sigma_r=float(sigma[r]),
        sigma_u=float(sigma[u]),
        log_likelihood=float(ll_trace[-1]),
        iterations=len(ll_trace),
        converged=converged,
        ll_trace=ll_trace,
    )


def mining_threshold(fit: GmmFit) -> float:
    """Cost cutoff for reliable pseudo boxes: the low-cost component's mean."""
    return fit.mu_r


def _posterior_argmax_cost(fit: GmmFit, costs: np.ndarray) -> float:
    """Observed cost with the highest reliable-component posterior (diagnostic only)."""
    dens_r = fit.w_r * _gaussian_pdf(costs, fit.mu_r, fit.sigma_r)
    dens_u = fit.w_u_mix * _gaussian_pdf(costs, fit.mu_u, fit.sigma_u)
    post = dens_r / np.maximum(dens_r + dens_u, 1e-300)
    return float(costs[int(np.argmax(post))])


@dataclass
class MiningDiagnostics:
    """Counts and fit summary from one cost-based mining pass."""

    total_initial: int
    kept: int
    dropped_no_proposals: int
    degenerate_fit: bool
    threshold: float | None = None
    posterior_argmax: float | None = None
    fit: GmmFit | None = None


def mine_cost_based(
    initial: list[list[PseudoLabel]],
    proposals: list[list[Detection]],
    w: CostWeights,
    em_config: EmConfig = EmConfig(),
) -> tuple[list[list[PseudoLabel]], MiningDiagnostics]:
    """Keep the initial pseudo boxes whose matched cost clusters as reliable.

    ``initial[i]`` and ``proposals[i]`` belong to image i of one batch. Each
    pseudo box is matched to a proposal by Hungarian matching on the
    classification/GIoU/L1 cost and annotated with its matched cost; costs
    are pooled over the whole batch before fitting the mixture. Boxes from
    images without enough proposals to match are dropped and counted. On a
    degenerate fit every matchable box is kept.
    """
    if len(initial) != len(proposals):
        raise ValueError("initial and proposals must align per image")
    total_initial = sum(len(labels) for labels in initial)
    annotated: list[list[PseudoLabel] | None] = []
    dropped = 0
    pooled: list[float] = []
    for labels, props in zip(initial, proposals):
        if not labels:
            annotated.append([])
            continue
        if len(props) < len(labels):
            annotated.append(None)
            dropped += len(labels)
            continue
        costs = build_cost_matrix(labels, props, w)
        assn = hungarian(costs)
        with_cost = []
        for i, label in enumerate(labels):
            j = assn.per_target[i][0]
            c = float(costs.values[i, j])
            with_cost.append(
                PseudoLabel(label.box, label.class_id, label.confidence, c, label.source_index)
            )
            pooled.append(c)
        annotated.append(with_cost)

    pooled_arr = np.array(pooled)
    try:
        fit = fit_gmm_1d(pooled_arr, em_config)
    except DegenerateFitError:
        kept = [labels if labels is not None else [] for labels in annotated]
        return kept, MiningDiagnostics(
            total_initial=total_initial,
            kept=sum(len(ls) for ls in kept),
            dropped_no_proposals=dropped,
            degenerate_fit=True,
        )
    threshold = mining_threshold(fit)
    kept = []
    for labels in annotated:
        if labels is None:
            kept.append([])
        else:
            kept.append([lab for lab in labels if lab.match_cost < threshold])
    return kept, MiningDiagnostics(
        total_initial=total_initial,
        kept=sum(len(ls) for ls in kept),
        dropped_no_proposals=dropped,
        degenerate_fit=False,
        threshold=threshold,
        posterior_argmax=_posterior_argmax_cost(fit, pooled_arr) if pooled else None,
        fit=fit,
    )
