"""Cross-view query consistency on a toy decoder.

RoI features pooled from one view's feature grid are embedded by a small MLP
and appended, as an extra query group, to the other view's decoder input. An
attention mask keeps the two groups mutually invisible, so the original
queries decode exactly as if the extra group did not exist; the decoded
extras from both sides are then pulled together by an MSE loss with the
teacher side held constant.

The decoder is a single block (masked self-attention, cross-attention over a
flattened feature grid, feed-forward, residuals, no normalization layers).
It is evaluated query by query so that appending masked-out queries cannot
perturb the others even at the bit level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import Box

__all__ = [
    "FeatureGrid",
    "QueryGroup",
    "QuerySet",
    "AttentionMask",
    "MlpParams",
    "DecoderParams",
    "roi_align",
    "embed_queries",
    "build_attention_mask",
    "toy_decode",
    "consistency_loss",
]


@dataclass
class FeatureGrid:
    """Dense [channels x height x width] features spanning [0, 1] x [0, 1]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3:
            raise ValueError(f"expected [C, H, W], got shape {self.values.shape}")
        if self.values.shape[1] < 1 or self.values.shape[2] < 1:
            raise ValueError("grid must have height and width >= 1")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid entries must be finite")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    def flattened(self) -> np.ndarray:
        """[H*W, C] memory rows for cross-attention, row-major over (y, x)."""
        c, h, w = self.values.shape
        return self.values.reshape(c, h * w).T


class QueryGroup(Enum):
    MATCHING = "matching"
    CONSISTENCY = "consistency"


@dataclass
class QuerySet:
    """Query embeddings with their group tags."""

    embeddings: np.ndarray
    groups: list[QueryGroup]

    def __post_init__(self) -> None:
        self.embeddings = np.asarray(self.embeddings, dtype=float)
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be [num_queries, dim]")
        if len(self.groups) != self.embeddings.shape[0]:
            raise ValueError("one group tag per query required")


@dataclass
class AttentionMask:
    """blocked[i][j] forbids query i from attending to query j."""

    blocked: np.ndarray

    def __post_init__(self) -> None:
        self.blocked = np.asarray(self.blocked, dtype=bool)
        n, m = self.blocked.shape
        if n != m:
            raise ValueError("mask must be square")


def _bilinear(grid: np.ndarray, gx: float, gy: float) -> np.ndarray:
    """Sample all channels of [C, H, W] at continuous (gx, gy), edge-clamped."""
    _, h, w = grid.shape
    gx = min(max(gx, 0.0), w - 1.0)
    gy = min(max(gy, 0.0), h - 1.0)
    x0, y0 = int(math.floor(gx)), int(math.floor(gy))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = gx - x0, gy - y0
    top = grid[:, y0, x0] * (1.0 - fx) + grid[:, y0, x1] * fx
    bot = grid[:, y1, x0] * (1.0 - fx) + grid[:, y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def roi_align(
    grid: FeatureGrid,
    box: Box,
    out_h: int = 7,
    out_w: int = 7,
    sampling: int = 2,
) -> np.ndarray:
    """Average-pool bilinear samples of the box into [C, out_h, out_w] bins.

    The box is split into an out_h x out_w lattice of bins; each bin is the
    mean of ``sampling x sampling`` bilinear samples placed at regular
    fractions of the bin, with no coordinate rounding anywhere. Cell (r, c)
    of the grid is centered at normalized ((c + 0.5) / W, (r + 0.5) / H).
    """
    if out_h < 1 or out_w < 1 or sampling < 1:
        raise ValueError("output dims and sampling must be >= 1")
    if box.area <= 0.0:
        raise ValueError(f"zero-area box: {box}")
    c, h, w = grid.values.shape
    out = np.zeros((c, out_h, out_w))
    bin_w = box.width / out_w
    bin_h = box.height / out_h
    for by in range(out_h):
        for bx in range(out_w):
            acc = np.zeros(c)
            for sy in range(sampling):
                for sx in range(sampling):
                    x = box.x_min + bin_w * (bx + (sx + 0.5) / sampling)
                    y = box.y_min + bin_h * (by + (sy + 0.5) / sampling)
                    acc += _bilinear(grid.values, x * w - 0.5, y * h - 0.5)
            out[:, by, bx] = acc / (sampling * sampling)
    return out


@dataclass
class MlpParams:
    """Two-layer MLP: out = w2 @ relu(w1 @ x + b1) + b2."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @staticmethod
    def create(rng: np.random.Generator, in_dim: int, hidden_dim: int, out_dim: int) -> "MlpParams":
        scale1 = 1.0 / math.sqrt(in_dim)
        scale2 = 1.0 / math.sqrt(hidden_dim)
        return MlpParams(
            w1=rng.normal(0.0, scale1, size=(hidden_dim, in_dim)),
            b1=np.zeros(hidden_dim),
            w2=rng.normal(0.0, scale2, size=(out_dim, hidden_dim)),
            b2=np.zeros(out_dim),
        )


def embed_queries(roi_feats: list[np.ndarray], mlp: MlpParams) -> np.ndarray:
    """Flatten pooled RoI tensors and push them through the MLP, one row each."""
    rows = []
    for feat in roi_feats:
        x = np.asarray(feat, dtype=float).reshape(-1)
        hidden = np.maximum(mlp.w1 @ x + mlp.b1, 0.0)
        rows.append(mlp.w2 @ hidden + mlp.b2)
    if not rows:
        return np.zeros((0, mlp.b2.size))
    return np.stack(rows)


def build_attention_mask(groups: list[QueryGroup]) -> AttentionMask:
    """Block attention across the matching/consistency group boundary, both ways."""
    n = len(groups)
    blocked = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            blocked[i, j] = groups[i] is not groups[j]
    return AttentionMask(blocked)


@dataclass
class DecoderParams:
    """Weights of the single-block toy decoder."""

    dim: int
    heads: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    cq: np.ndarray
    ck: np.ndarray
    cv: np.ndarray
    co: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray

    def __post_init__(self) -> None:
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @staticmethod
    def create(
        rng: np.random.Generator,
        dim: int = 16,
        heads: int = 2,
        memory_channels: int | None = None,
        ffn_hidden: int | None = None,
    ) -> "DecoderParams":
        mem_c = memory_channels if memory_channels is not None else dim
        hidden = ffn_hidden if ffn_hidden is not None else 2 * dim
        s = 1.0 / math.sqrt(dim)
        sm = 1.0 / math.sqrt(mem_c)
        return DecoderParams(
            dim=dim,
            heads=heads,
            wq=rng.normal(0.0, s, (dim, dim)),
            wk=rng.normal(0.0, s, (dim, dim)),
            wv=rng.normal(0.0, s, (dim, dim)),
            wo=rng.normal(0.0, s, (dim, dim)),
            cq=rng.normal(0.0, s, (dim, dim)),
            ck=rng.normal(0.0, sm, (dim, mem_c)),
            cv=rng.normal(0.0, sm, (dim, mem_c)),
            co=rng.normal(0.0, s, (dim, dim)),
            ffn_w1=rng.normal(0.0, s, (hidden, dim)),
            ffn_b1=np.zeros(hidden),
            ffn_w2=rng.normal(0.0, 1.0 / math.sqrt(hidden), (dim, hidden)),
            ffn_b2=np.zeros(dim),
        )


def _attend(query: np.ndarray, keys: np.ndarray, values: np.ndarray, heads: int) -> np.ndarray:
    """Multi-head attention of one projected query over projected keys/values."""
    dim = query.size
    head_dim = dim // heads
    out = np.empty(dim)
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        scores = keys[:, lo:hi] @ query[lo:hi] / math.sqrt(head_dim)
        scores -= scores.max()
        weights = np.exp(scores)
        weights /= weights.sum()
        out[lo:hi] = weights @ values[:, lo:hi]
    return out


def toy_decode(
    queries: QuerySet,
    memory: FeatureGrid | np.ndarray,
    mask: AttentionMask,
    params: DecoderParams,
) -> np.ndarray:
    """Decode each query through masked self-attention, cross-attention, FFN.

    Queries are processed independently: query i self-attends only over the
    columns the mask leaves unblocked (it must at least see itself), so
    masked-out queries cannot influence it even in the last bit. Memory may
    be a FeatureGrid (flattened internally) or an [M, C] array.
    """
    x = queries.embeddings
    n = x.shape[0]
    if mask.blocked.shape[0] != n:
        raise ValueError(f"mask size {mask.blocked.shape[0]} != num queries {n}")
    mem = memory.flattened() if isinstance(memory, FeatureGrid) else np.asarray(memory, dtype=float)
    # Row-by-row projections: fixed-shape matvecs keep each row's bits
    # independent of how many queries sit in the set.
    sa_keys = np.stack([params.wk @ x[j] for j in range(n)]) if n else np.zeros((0, params.dim))
    sa_vals = np.stack([params.wv @ x[j] for j in range(n)]) if n else np.zeros((0, params.dim))
    mem_keys = mem @ params.ck.T
    mem_vals = mem @ params.cv.T
    out = np.empty_like(x)
    for i in range(n):
        visible = [j for j in range(n) if not mask.blocked[i, j]]
        if i not in visible:
            raise ValueError(f"query {i} may not be blocked from itself")
        q = params.wq @ x[i]
        attended = _attend(q, sa_keys[visible], sa_vals[visible], params.heads)
        x1 = x[i] + params.wo @ attended
        q2 = params.cq @ x1
        x2 = x1 + params.co @ _attend(q2, mem_keys, mem_vals, params.heads)
        out[i] = x2 + params.ffn_w2 @ np.maximum(params.ffn_w1 @ x2 + params.ffn_b1, 0.0) + params.ffn_b2
    return out


def consistency_loss(o_hat_s: np.ndarray, o_hat_t: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error between student and (detached) teacher decodings.

    Returns the loss and its gradient with respect to the student side only;
    the teacher side is a constant by construction.
    """
    s = np.asarray(o_hat_s, dtype=float)
    t = np.asarray(o_hat_t, dtype=float)
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {t.shape}")
    if s.size == 0:
        return 0.0, np.zeros_like(s)
    diff = s - t
    return float(np.mean(diff**2)), 2.0 * diff / diff.size
