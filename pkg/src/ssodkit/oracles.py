"""Independent brute-force references used to cross-check the fast paths.

Nothing here shares code with the implementations it checks: the assignment
oracle enumerates injections with a subset DP, and gradients are checked by
central finite differences.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

__all__ = ["brute_force_assignment_min", "finite_difference"]


def brute_force_assignment_min(costs: np.ndarray) -> float:
    """Exact minimum total cost over all injections of targets into proposals.

    Subset dynamic program: dp[mask] is the best cost of assigning the first
    popcount(mask) targets to exactly the proposals in mask.
    """
    costs = np.asarray(costs, dtype=float)
    n_t, n_p = costs.shape
    if n_t == 0:
        return 0.0
    if n_t > n_p:
        raise ValueError(f"infeasible: {n_t} targets, {n_p} proposals")
    size = 1 << n_p
    dp = np.full(size, np.inf)
    dp[0] = 0.0
    best = np.inf
    for mask in range(size):
        if dp[mask] == np.inf:
            continue
        i = int(mask).bit_count()
        if i == n_t:
            best = min(best, dp[mask])
            continue
        row = costs[i]
        for j in range(n_p):
            bit = 1 << j
            if mask & bit:
                continue
            value = dp[mask] + row[j]
            if value < dp[mask | bit]:
                dp[mask | bit] = value
    return float(best)


def finite_difference(
    fn: Callable[[np.ndarray], float], x0: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central finite-difference gradient of a scalar function at x0."""
    x0 = np.asarray(x0, dtype=float)
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        hi = x0.copy()
        lo = x0.copy()
        hi.flat[i] += h
        lo.flat[i] -= h
        grad.flat[i] = (fn(hi) - fn(lo)) / (2.0 * h)
    return grad
