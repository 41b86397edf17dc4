"""Bi-level sampling estimators, variances, and confidence intervals.

Chunks are sampled without replacement, then tuples without replacement
inside each sampled chunk. Per-chunk sufficient statistics are
(M_j, m_j, y1=sum x, y2=sum x^2, c1=predicate hits); everything here is a
pure function over those.

Conventions for degenerate designs:
  * n == N kills the between-chunk term exactly (stratified case).
  * n == 1 (with N > 1) leaves the between-chunk term undefined: the
    variance estimate is +inf, never a guess.
  * m_j == M_j kills chunk j's within term; m_j == 1 < M_j makes it +inf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Optional, Sequence

import numpy as np

REL_WIDTH_FLOOR = 1e-12


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class ChunkStats:
    """Per-chunk sample statistics: m_j tuples drawn from M_j."""

    chunk_id: int
    big_m: int  # M_j
    m: int  # m_j
    y1: float  # sum of x over the sample
    y2: float  # sum of x^2 over the sample
    c1: float = 0.0  # predicate-passing tuples in the sample

    def __post_init__(self):
        if self.m < 0 or self.m > self.big_m:
            raise EstimationError(f"chunk {self.chunk_id}: m={self.m} outside [0, {self.big_m}]")


@dataclass
class EstimateSnapshot:
    tau_hat: float
    var_hat: float
    lo: float
    hi: float
    error_ratio: float
    n: int  # chunks included
    tuples: int  # sum of m_j included
    chunks_read: int = 0
    bytes_read: int = 0
    timestamp_ms: float = 0.0
    regime: str = "IO_BOUND"
    stale: bool = False
    group: Optional[int] = None
    included: tuple[int, ...] = field(default_factory=tuple)
    t_eval_ms: float = 0.0

    @property
    def unbounded(self) -> bool:
        return not math.isfinite(self.var_hat)


def z_score(confidence: float) -> float:
    """Standard normal quantile at 1-(1-c)/2."""
    if not (0.0 < confidence < 1.0):
        raise EstimationError("confidence must lie in (0, 1)")
    return NormalDist().inv_cdf(1.0 - (1.0 - confidence) / 2.0)


def sample_sq_dev(s: ChunkStats) -> float:
    """Sum of squared deviations in chunk j's sample, clamped at 0."""
    if s.m < 1:
        raise EstimationError(f"chunk {s.chunk_id}: empty sample")
    return max(s.y2 - s.y1 * s.y1 / s.m, 0.0)


def chunk_estimate(s: ChunkStats) -> float:
    """Unbiased chunk-sum estimate (M_j/m_j) * y1."""
    if s.m < 1:
        raise EstimationError(f"chunk {s.chunk_id}: estimate undefined at m=0")
    return s.big_m / s.m * s.y1


def within_chunk_variance(s: ChunkStats) -> float:
    """Estimated within-chunk variance of the chunk-sum estimate.

    (M_j/m_j) * ((M_j-m_j)/(m_j-1)) * sum (x - mean)^2 over the sample.
    """
    if s.m == s.big_m:
        return 0.0
    if s.m < 2:
        return math.inf
    return (s.big_m / s.m) * ((s.big_m - s.m) / (s.m - 1)) * sample_sq_dev(s)


def bilevel_estimate(stats: Sequence[ChunkStats], n_chunks_total: int) -> float:
    """(N/n) * sum of chunk estimates."""
    if not stats:
        raise EstimationError("no chunk statistics")
    n = len(stats)
    return n_chunks_total / n * sum(chunk_estimate(s) for s in stats)


def bilevel_variance_estimate(stats: Sequence[ChunkStats], n_chunks_total: int) -> float:
    """Unbiased variance estimate of the bi-level estimator (may be +inf)."""
    if not stats:
        raise EstimationError("no chunk statistics")
    n = len(stats)
    big_n = n_chunks_total
    y_hats = [chunk_estimate(s) for s in stats]
    if n == big_n:
        between = 0.0
    elif n == 1:
        return math.inf
    else:
        mean = sum(y_hats) / n
        between = (big_n / n) * ((big_n - n) / (n - 1)) * sum((y - mean) ** 2 for y in y_hats)
    within = 0.0
    for s in stats:
        w = within_chunk_variance(s)
        if math.isinf(w):
            return math.inf
        within += w
    return between + (big_n / n) * within


def bilevel_covariance_estimate(
    stats_a: Sequence[ChunkStats], stats_b: Sequence[ChunkStats], n_chunks_total: int, cross1: Sequence[float]
) -> float:
    """Covariance analog of the variance estimate for two aggregates sharing
    one sample; cross1[j] is sum of a_i*b_i over chunk j's sample."""
    n = len(stats_a)
    big_n = n_chunks_total
    ya = [chunk_estimate(s) for s in stats_a]
    yb = [chunk_estimate(s) for s in stats_b]
    if n == big_n:
        between = 0.0
    elif n == 1:
        return math.inf
    else:
        ma, mb = sum(ya) / n, sum(yb) / n
        between = (big_n / n) * ((big_n - n) / (n - 1)) * sum((a - ma) * (b - mb) for a, b in zip(ya, yb))
    within = 0.0
    for sa, sb, c in zip(stats_a, stats_b, cross1):
        if sa.m == sa.big_m:
            continue
        if sa.m < 2:
            return math.inf
        s_ab = c - sa.y1 * sb.y1 / sa.m
        within += (sa.big_m / sa.m) * ((sa.big_m - sa.m) / (sa.m - 1)) * s_ab
    return between + (big_n / n) * within


def ratio_estimate(stats: Sequence[ChunkStats], n_chunks_total: int) -> tuple[float, float]:
    """AVG as SUM/COUNT over the same sample; variance by the first-order
    delta method."""
    cnt_stats = [ChunkStats(s.chunk_id, s.big_m, s.m, s.c1, s.c1, s.c1) for s in stats]
    tau_s = bilevel_estimate(stats, n_chunks_total)
    tau_c = bilevel_estimate(cnt_stats, n_chunks_total)
    if tau_c <= 0.0:
        return math.nan, math.inf
    r = tau_s / tau_c
    v_s = bilevel_variance_estimate(stats, n_chunks_total)
    v_c = bilevel_variance_estimate(cnt_stats, n_chunks_total)
    if math.isinf(v_s) or math.isinf(v_c):
        return r, math.inf
    # x_i = expr * pass_i, so sum x*w == sum x == y1.
    cross = [s.y1 for s in stats]
    c_sc = bilevel_covariance_estimate(stats, cnt_stats, n_chunks_total, cross)
    var = (v_s - 2.0 * r * c_sc + r * r * v_c) / (tau_c * tau_c)
    return r, max(var, 0.0)


def bilevel_variance_true(
    chunk_values: Sequence[np.ndarray], n: int, m_per_chunk: Sequence[int]
) -> float:
    """Exact variance of the bi-level estimator for a fixed (n, m_j) design
    over fully known data. Testing oracle; needs the whole dataset."""
    big_n = len(chunk_values)
    if not (1 <= n <= big_n):
        raise EstimationError(f"n={n} outside [1, {big_n}]")
    if len(m_per_chunk) != big_n:
        raise EstimationError("m_per_chunk must give m_j for every chunk")
    ys = np.array([float(np.sum(v)) for v in chunk_values])
    tau = float(ys.sum())
    if big_n == 1:
        if n != 1:
            raise EstimationError("N=1 requires n=1")
        between = 0.0
    elif n == big_n:
        between = 0.0
    else:
        between = (big_n / (big_n - 1)) * ((big_n - n) / n) * float(np.sum((ys - tau / big_n) ** 2))
    within = 0.0
    for j, vals in enumerate(chunk_values):
        big_m = int(vals.size)
        m = int(m_per_chunk[j])
        if not (1 <= m <= big_m):
            raise EstimationError(f"chunk {j}: m={m} outside [1, {big_m}]")
        if big_m == 1 or m == big_m:
            continue
        dev = float(np.sum((vals - ys[j] / big_m) ** 2))
        within += (big_m / (big_m - 1)) * ((big_m - m) / m) * dev
    return between + (big_n / n) * within


def confidence_interval(tau_hat: float, var_hat: float, confidence: float) -> tuple[float, float]:
    """Normal-quantile interval; infinite variance yields an unbounded one."""
    if var_hat < 0:
        raise EstimationError("negative variance")
    if math.isinf(var_hat):
        return -math.inf, math.inf
    h = z_score(confidence) * math.sqrt(var_hat)
    return tau_hat - h, tau_hat + h


def error_ratio(lo: float, hi: float, tau_hat: float) -> float:
    if math.isinf(lo) or math.isinf(hi):
        return math.inf
    return (hi - lo) / max(abs(tau_hat), REL_WIDTH_FLOOR)


def local_chunk_interval(s: ChunkStats, confidence: float) -> tuple[float, float]:
    """Chunk estimate and half-width from the within-chunk variance alone."""
    y_hat = chunk_estimate(s)
    v = within_chunk_variance(s)
    if math.isinf(v):
        return y_hat, math.inf
    return y_hat, z_score(confidence) * math.sqrt(v)


def local_satisfied(s: ChunkStats, epsilon: float, confidence: float) -> bool:
    """Per-chunk accuracy test: half-width <= epsilon * |chunk estimate|."""
    if s.m < 1:
        return False
    y_hat, h = local_chunk_interval(s, confidence)
    return h <= epsilon * abs(y_hat)


def chunk_level_estimate(chunk_sums: Sequence[float], n_chunks_total: int) -> tuple[float, float]:
    """Chunk-level sampling: every sampled chunk fully consumed (m_j = M_j)."""
    stats = [ChunkStats(j, 1, 1, float(y), float(y) * float(y)) for j, y in enumerate(chunk_sums)]
    return bilevel_estimate(stats, n_chunks_total), bilevel_variance_estimate(stats, n_chunks_total)


def make_snapshot(
    stats: Sequence[ChunkStats],
    n_chunks_total: int,
    confidence: float,
    kind: str = "SUM",
) -> EstimateSnapshot:
    """Point estimate + interval from in-order chunk statistics."""
    if kind == "AVG":
        tau, var = ratio_estimate(stats, n_chunks_total)
    else:
        tau = bilevel_estimate(stats, n_chunks_total)
        var = bilevel_variance_estimate(stats, n_chunks_total)
    lo, hi = confidence_interval(tau, var, confidence)
    return EstimateSnapshot(
        tau_hat=tau,
        var_hat=var,
        lo=lo,
        hi=hi,
        error_ratio=error_ratio(lo, hi, tau),
        n=len(stats),
        tuples=int(sum(s.m for s in stats)),
        included=tuple(s.chunk_id for s in stats),
    )
