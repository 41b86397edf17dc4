"""Verification harness: exact oracles, exhaustive design enumeration,
Monte Carlo coverage of the confidence bounds, and regime benchmarks.

The coverage experiment replays the parallel completion process in
virtual time so a desk-scale dataset can exhibit the same effects as a
multi-hour run: per-chunk processing time is coupled to the chunk's
aggregate (heavier content takes longer to extract), which is exactly the
correlation that makes completion-order estimation biased. The in-order
arm and the completion-order arm share one simulated trajectory, so any
coverage gap between them is attributable to inclusion order alone.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .controller import run_query
from .estimator import (
    ChunkStats,
    bilevel_estimate,
    bilevel_variance_estimate,
    bilevel_variance_true,
    chunk_level_estimate,
    confidence_interval,
    z_score,
)
from .pipeline import PipelineConfig
from .query import AggregateQuery, eval_expr, eval_pred
from .store import ChunkIndex, Schema, build_chunk_index, read_chunk
from .strategies import StrategyKind


# ------------------------------------------------------------------ oracle


def oracle_aggregate(index: ChunkIndex, schema: Schema, query: AggregateQuery):
    """Ground truth by full sequential scan with exact accumulation.

    Parses through python's own int()/float() and walks the expression tree
    per record batch, independent of the engine's extraction kernels.
    """
    total = 0
    count = 0
    rejects = 0
    as_int = schema.all_int
    for j in range(index.n_chunks):
        chunk = read_chunk(index, j)
        if index.fmt == "csv":
            text = chunk.data.tobytes().decode("ascii")
            rows = []
            for line in text.splitlines():
                parts = line.split(chr(index.delim))
                if len(parts) != len(schema.names):
                    rejects += 1
                    continue
                try:
                    rows.append([int(v) if as_int else float(v) for v in parts])
                except ValueError:
                    rejects += 1
            arr = np.array(rows, dtype=np.int64 if as_int else np.float64)
        else:
            from .store import decode_rows_binary

            rows_idx = np.arange(chunk.n_records, dtype=np.int64)
            cols = np.arange(len(schema.names), dtype=np.int64)
            arr, _ = decode_rows_binary(chunk, schema, rows_idx, cols, dtype=np.int64 if as_int else np.float64)
        cols_map = {name: arr[:, i] for i, name in enumerate(schema.names)}
        mask = eval_pred(query.predicate, cols_map, arr.shape[0])
        if np.isscalar(mask) or getattr(mask, "ndim", 0) == 0:
            mask = np.full(arr.shape[0], bool(mask))
        e = eval_expr(query.expression, cols_map)
        if np.isscalar(e) or getattr(e, "ndim", 0) == 0:
            e = np.full(arr.shape[0], e)
        if as_int:
            total += int(e[mask].sum())
        else:
            total += float(math.fsum(e[mask].tolist()))
        count += int(np.count_nonzero(mask))
    if query.kind == "AVG":
        return (total / count if count else math.nan), rejects
    if query.kind == "COUNT":
        return count, rejects
    return total, rejects


def chunk_x_arrays(index: ChunkIndex, schema: Schema, query: AggregateQuery) -> list[np.ndarray]:
    """Per-chunk x vectors (expression value, 0 on predicate failure) for
    simulation experiments; one pass over the raw file."""
    out = []
    for j in range(index.n_chunks):
        chunk = read_chunk(index, j)
        if index.fmt == "csv":
            text = chunk.data.tobytes().decode("ascii")
            rows = [[float(v) for v in line.split(chr(index.delim))] for line in text.splitlines()]
            arr = np.array(rows, dtype=np.float64)
        else:
            from .store import decode_rows_binary

            rows_idx = np.arange(chunk.n_records, dtype=np.int64)
            cols = np.arange(len(schema.names), dtype=np.int64)
            arr, _ = decode_rows_binary(chunk, schema, rows_idx, cols)
        cols_map = {name: arr[:, i] for i, name in enumerate(schema.names)}
        n = arr.shape[0]
        mask = eval_pred(query.predicate, cols_map, n)
        if np.isscalar(mask) or getattr(mask, "ndim", 0) == 0:
            mask = np.full(n, bool(mask))
        e = eval_expr(query.expression, cols_map)
        if np.isscalar(e) or getattr(e, "ndim", 0) == 0:
            e = np.full(n, float(e))
        out.append(np.where(mask, e.astype(np.float64), 0.0))
    return out


# ------------------------------------------------- exhaustive enumeration


@dataclass
class DesignDistribution:
    n_designs: int
    mean_tau: float
    var_tau: float  # population variance of tau_hat over all designs
    mean_var_hat: float
    true_tau: float
    true_var: float  # exact variance for the fixed design


def enumerate_designs(chunk_values: Sequence[np.ndarray], n: int, m: int) -> DesignDistribution:
    """Exhaustively enumerate every bi-level design of n chunks and m tuples
    per sampled chunk, weighting the two stages the way the sampling does:
    chunk subsets are uniform among themselves, tuple picks uniform within
    a subset (subsets of unequal chunks have unequal combination counts).

    Combinatorially bounded: intended for N <= 5, M_j <= 6.
    """
    big_n = len(chunk_values)
    if big_n > 6 or any(v.size > 8 for v in chunk_values):
        raise ValueError("instance too large for exhaustive enumeration")
    tau = float(sum(float(v.sum()) for v in chunk_values))
    per_chunk_subsets = [list(itertools.combinations(range(v.size), m)) for v in chunk_values]
    subset_means_tau = []
    subset_means_sq = []
    subset_means_var = []
    n_designs = 0
    for subset in itertools.combinations(range(big_n), n):
        taus = []
        var_hats = []
        for picks in itertools.product(*(per_chunk_subsets[j] for j in subset)):
            stats = []
            for j, pick in zip(subset, picks):
                vals = chunk_values[j][list(pick)]
                stats.append(
                    ChunkStats(j, int(chunk_values[j].size), m, float(vals.sum()), float((vals**2).sum()))
                )
            taus.append(bilevel_estimate(stats, big_n))
            var_hats.append(bilevel_variance_estimate(stats, big_n))
        n_designs += len(taus)
        taus_a = np.array(taus)
        subset_means_tau.append(float(taus_a.mean()))
        subset_means_sq.append(float(((taus_a - tau) ** 2).mean()))
        subset_means_var.append(float(np.mean(var_hats)))
    true_var = bilevel_variance_true(chunk_values, n, [m] * big_n)
    return DesignDistribution(
        n_designs=n_designs,
        mean_tau=float(np.mean(subset_means_tau)),
        var_tau=float(np.mean(subset_means_sq)),
        mean_var_hat=float(np.mean(subset_means_var)),
        true_tau=tau,
        true_var=true_var,
    )


def random_small_instance(rng: np.random.Generator, max_chunks: int = 4, max_tuples: int = 5):
    """A small random dataset for enumeration oracles: integer values keep
    the arithmetic exactly representable."""
    big_n = int(rng.integers(2, max_chunks + 1))
    out = []
    for _ in range(big_n):
        big_m = int(rng.integers(2, max_tuples + 1))
        out.append(rng.integers(0, 20, size=big_m).astype(np.float64))
    return out


# ------------------------------------------------------ coverage sim


@dataclass
class CoverageReport:
    fractions: tuple[float, ...]
    runs: int
    confidence: float
    coverage: dict[str, list[float]] = field(default_factory=dict)
    covered_counts: dict[str, list[int]] = field(default_factory=dict)

    def format_table(self) -> str:
        arms = sorted(self.coverage)
        lines = [
            f"# coverage runs={self.runs} confidence={self.confidence}",
            "fraction " + " ".join(arms),
        ]
        for i, f in enumerate(self.fractions):
            row = [f"{f:.2f}"] + [f"{self.coverage[a][i]:.2f}" for a in arms]
            lines.append(" ".join(row))
        return "\n".join(lines)


@dataclass
class CoverageConfig:
    runs: int = 100
    fractions: tuple[float, ...] = (0.02, 0.03, 0.04, 0.05, 0.10, 0.20, 0.30)
    confidence: float = 0.95
    workers: int = 5
    seed: int = 2024
    work_coupling: float = 2.5  # strength of the value<->duration correlation
    work_noise: float = 0.25
    local_epsilon: float = 0.15  # per-chunk target driving the bi-level arm's m_j
    batch: int = 256

    def __post_init__(self):
        if self.runs < 30:
            raise ValueError("need at least 30 runs for a meaningful ratio")


def _simulate_starts_ends(durations: np.ndarray, workers: int) -> tuple[np.ndarray, np.ndarray]:
    """Start/finish times when chunks are handed to `workers` workers in
    schedule order."""
    import heapq

    free = [0.0] * workers
    heapq.heapify(free)
    starts = np.empty(durations.size)
    ends = np.empty(durations.size)
    for i, d in enumerate(durations):
        t = heapq.heappop(free)
        starts[i] = t
        ends[i] = t + d
        heapq.heappush(free, ends[i])
    return starts, ends


def _local_stop_m(cum1: np.ndarray, cum2: np.ndarray, big_m: int, eps: float, z: float, batch: int) -> int:
    """Smallest batch-aligned m at which the within-chunk interval meets the
    local target (the single-pass worker rule), else the full chunk."""
    m = batch
    while m < big_m:
        y1 = cum1[m]
        s = max(cum2[m] - y1 * y1 / m, 0.0)
        var = (big_m / m) * ((big_m - m) / (m - 1)) * s
        y_hat = big_m / m * y1
        if z * math.sqrt(var) <= eps * abs(y_hat):
            return m
        m += batch
    return big_m


def monte_carlo_coverage(chunk_x: Sequence[np.ndarray], config: CoverageConfig) -> CoverageReport:
    """Coverage of nominal-confidence bounds at fixed fractions of processed
    chunks, for three estimation arms over one simulated pipeline family:

      bi_level        in-order schedule-prefix estimation with partial m_j
      chunk_level     completion-order chunk estimates, no reorder barrier
      chunk_reorder   chunk estimates restricted to the completed prefix
    """
    big_n = len(chunk_x)
    sizes = np.array([v.size for v in chunk_x])
    ys = np.array([float(v.sum()) for v in chunk_x])
    tau = float(ys.sum())
    z = z_score(config.confidence)
    zs = (ys - ys.mean()) / max(float(ys.std()), 1e-12)

    arms = ("bi_level", "chunk_level", "chunk_reorder")
    covered = {a: np.zeros(len(config.fractions), dtype=np.int64) for a in arms}
    finite = {a: np.zeros(len(config.fractions), dtype=np.int64) for a in arms}

    for r in range(config.runs):
        rng = np.random.default_rng((config.seed, r))
        schedule = rng.permutation(big_n)
        # Per-tuple extraction work: content-heavy chunks are slower (the
        # one-sided coupling leaves the bulk homogeneous while the heavy
        # tail produces the long-running chunks that stall completion).
        eta = rng.normal(0.0, config.work_noise, size=big_n)
        w = np.exp(config.work_coupling * np.maximum(zs[schedule], 0.0) + eta)
        m_sched = sizes[schedule]
        y_sched = ys[schedule]

        # Per-chunk extraction prefixes for the bi-level arm.
        cums = []
        m_stop = np.empty(big_n, dtype=np.int64)
        for i, j in enumerate(schedule):
            perm = rng.permutation(sizes[j])
            xp = chunk_x[j][perm]
            c1 = np.concatenate([[0.0], np.cumsum(xp)])
            c2 = np.concatenate([[0.0], np.cumsum(xp * xp)])
            cums.append((c1, c2))
            m_stop[i] = _local_stop_m(c1, c2, sizes[j], config.local_epsilon, z, config.batch)

        # --- chunk-level arms: full extraction of every chunk
        durations_full = m_sched * w
        starts_f, ends_f = _simulate_starts_ends(durations_full, config.workers)
        completion_order = np.argsort(ends_f, kind="stable")
        for fi, frac in enumerate(config.fractions):
            c = max(int(math.ceil(frac * big_n)), 1)
            t_c = ends_f[completion_order[c - 1]]
            done = completion_order[:c]
            # completion order, no barrier
            est, var = chunk_level_estimate(y_sched[done].tolist(), big_n)
            if math.isfinite(var):
                finite["chunk_level"][fi] += 1
                lo, hi = confidence_interval(est, var, config.confidence)
                covered["chunk_level"][fi] += int(lo <= tau <= hi)
            # reorder barrier: longest completed schedule prefix at t_c
            done_mask = ends_f <= t_c
            k = 0
            while k < big_n and done_mask[k]:
                k += 1
            if k >= 2:
                est, var = chunk_level_estimate(y_sched[:k].tolist(), big_n)
                if math.isfinite(var):
                    finite["chunk_reorder"][fi] += 1
                    lo, hi = confidence_interval(est, var, config.confidence)
                    covered["chunk_reorder"][fi] += int(lo <= tau <= hi)

        # --- bi-level in-order arm: chunks finalized at their local stop
        durations_bi = m_stop * w
        starts_b, ends_b = _simulate_starts_ends(durations_bi, config.workers)
        ends_sorted = np.sort(ends_b)
        for fi, frac in enumerate(config.fractions):
            c = max(int(math.ceil(frac * big_n)), 1)
            t_c = ends_sorted[c - 1]
            stats = []
            for i in range(big_n):
                if starts_b[i] > t_c:
                    break
                if ends_b[i] <= t_c:
                    m = int(m_stop[i])
                else:
                    m = int((t_c - starts_b[i]) / w[i])
                    m = min(m, int(m_stop[i]))
                if m < 2:
                    break
                c1, c2 = cums[i]
                stats.append(
                    ChunkStats(int(schedule[i]), int(m_sched[i]), m, float(c1[m]), float(c2[m]))
                )
            if len(stats) >= 1:
                est = bilevel_estimate(stats, big_n)
                var = bilevel_variance_estimate(stats, big_n)
                if math.isfinite(var):
                    finite["bi_level"][fi] += 1
                    lo, hi = confidence_interval(est, var, config.confidence)
                    covered["bi_level"][fi] += int(lo <= tau <= hi)

    report = CoverageReport(
        fractions=tuple(config.fractions), runs=config.runs, confidence=config.confidence
    )
    for a in arms:
        denom = np.maximum(finite[a], 1)
        report.coverage[a] = (covered[a] / denom).round(4).tolist()
        report.covered_counts[a] = covered[a].tolist()
    return report


# ------------------------------------------------------ regime benchmark


def generate_blocked(
    path: str | Path,
    n_chunks: int = 64,
    per_chunk: int = 4096,
    base: int = 1000,
    noise: int = 50,
    seed: int = 0,
) -> tuple[Schema, ChunkIndex]:
    """Within-homogeneous / between-heterogeneous dataset: chunk j holds
    values near (j+1)*base. Fixed-width zero-padded text keeps rows the
    same byte length so chunk boundaries land exactly every `per_chunk`
    records."""
    rng = np.random.default_rng(seed)
    width = len(str((n_chunks + 1) * base + noise)) + 1
    with open(path, "w") as f:
        for j in range(n_chunks):
            vals = (j + 1) * base + rng.integers(-noise, noise + 1, size=per_chunk)
            f.write("\n".join(str(int(v)).zfill(width) for v in vals.tolist()))
            f.write("\n")
    schema = Schema(("a1",), ("int64",))
    schema.save(str(path) + ".schema")
    index = build_chunk_index(path, schema, target_chunk_bytes=per_chunk * (width + 1))
    return schema, index


@dataclass
class BenchmarkRow:
    strategy: str
    state: str
    wall_time_s: float
    chunks_read: int  # chunks consumed by extraction (basis of the chunks ratio)
    tuples_extracted: int
    error_ratio: float
    chunk_m: dict[int, int]


def regime_benchmark(
    index: ChunkIndex,
    schema: Schema,
    query: AggregateQuery,
    strategies: Sequence[StrategyKind],
    threads: int,
    per_tuple_cost: float = 0.0,
    seed: int = 0,
    buffer_capacity: int = 2,
) -> dict[str, BenchmarkRow]:
    """One run per strategy under identical seeds; never parallel across
    strategies so wall times are comparable."""
    out: dict[str, BenchmarkRow] = {}
    for strat in strategies:
        cfg = PipelineConfig(
            threads=threads,
            buffer_capacity=buffer_capacity,
            per_tuple_cost=per_tuple_cost,
            seed=seed,
        )
        t0 = time.perf_counter()
        run = run_query(index, schema, query, strat, cfg)
        wall = time.perf_counter() - t0
        f = run.final_snapshot
        out[strat.value] = BenchmarkRow(
            strategy=strat.value,
            state=run.state,
            wall_time_s=wall,
            chunks_read=run.chunks_extracted,
            tuples_extracted=run.tuples_extracted,
            error_ratio=f.error_ratio if f is not None else math.inf,
            chunk_m=dict(run.chunk_m),
        )
    return out


def format_benchmark(rows: dict[str, BenchmarkRow], total_chunks: int, total_tuples: int) -> str:
    lines = ["strategy state time_s chunks_ratio tuples_ratio error_ratio"]
    for name, r in rows.items():
        lines.append(
            f"{name} {r.state} {r.wall_time_s:.3f} "
            f"{r.chunks_read / total_chunks:.4f} {r.tuples_extracted / total_tuples:.4f} "
            f"{r.error_ratio:.6g}"
        )
    return "\n".join(lines)
