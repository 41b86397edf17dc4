import math
import os

import numpy as np
import pytest

from olaraw import store
from olaraw.harness import (
    CoverageConfig,
    chunk_x_arrays,
    enumerate_designs,
    format_benchmark,
    generate_blocked,
    monte_carlo_coverage,
    oracle_aggregate,
    random_small_instance,
    regime_benchmark,
)
from olaraw.pipeline import PipelineConfig
from olaraw.query import parse_query
from olaraw.store import Schema
from olaraw.strategies import StrategyKind
from olaraw.controller import run_query


def test_oracle_closed_form(tmp_path):
    path = str(tmp_path / "n.csv")
    open(path, "w").write("\n".join(str(i) for i in range(1, 101)) + "\n")
    schema = Schema(("a1",), ("int64",))
    index = store.build_chunk_index(path, schema, target_chunk_bytes=10**6)
    total, rejects = oracle_aggregate(index, schema, parse_query("SELECT SUM(a1) FROM t"))
    assert total == 5050 and rejects == 0
    count, _ = oracle_aggregate(index, schema, parse_query("SELECT COUNT(*) FROM t WHERE a1 > 1000"))
    assert count == 0
    avg, _ = oracle_aggregate(index, schema, parse_query("SELECT AVG(a1) FROM t"))
    assert avg == pytest.approx(50.5)


def test_oracle_counts_malformed(tmp_path):
    path = str(tmp_path / "bad.csv")
    open(path, "w").write("1,2\nxx,2\n3,4\n")
    schema = Schema(("a1", "a2"), ("int64", "int64"))
    index = store.build_chunk_index(path, schema, target_chunk_bytes=10**6)
    total, rejects = oracle_aggregate(index, schema, parse_query("SELECT SUM(a1) FROM t"))
    assert total == 4 and rejects == 1


def test_oracle_matches_ext_strategy(small_dataset):
    index, schema = small_dataset
    query = parse_query("SELECT SUM(2*a1 + a4) FROM t WHERE a2 BETWEEN 0 AND 800000000")
    truth, _ = oracle_aggregate(index, schema, query)
    run = run_query(index, schema, query, StrategyKind.EXT, PipelineConfig(threads=2, seed=0))
    assert run.exact_value == truth


def test_chunk_x_arrays_consistent_with_oracle(small_dataset):
    index, schema = small_dataset
    query = parse_query("SELECT SUM(a1) FROM t WHERE a2 BETWEEN 0 AND 500000000")
    xs = chunk_x_arrays(index, schema, query)
    assert len(xs) == index.n_chunks
    assert [v.size for v in xs] == index.counts.tolist()
    truth, _ = oracle_aggregate(index, schema, query)
    assert sum(float(v.sum()) for v in xs) == pytest.approx(truth, rel=1e-12)


def test_enumerate_designs_bounds():
    with pytest.raises(ValueError):
        enumerate_designs([np.zeros(20)], 1, 2)


def test_random_small_instances_are_enumerable():
    rng = np.random.default_rng(1)
    chunks = random_small_instance(rng)
    assert 2 <= len(chunks) <= 4
    assert all(2 <= c.size <= 5 for c in chunks)


def test_coverage_high_confidence_covers_everything(small_dataset):
    index, schema = small_dataset
    query = parse_query("SELECT SUM(a1) FROM t")
    xs = chunk_x_arrays(index, schema, query)
    cfg = CoverageConfig(runs=40, confidence=0.9999, fractions=(0.2, 0.5), seed=5)
    rep = monte_carlo_coverage(xs, cfg)
    assert all(c >= 0.97 for c in rep.coverage["bi_level"])


def test_coverage_deterministic(small_dataset):
    index, schema = small_dataset
    query = parse_query("SELECT SUM(a1) FROM t")
    xs = chunk_x_arrays(index, schema, query)
    cfg = CoverageConfig(runs=40, fractions=(0.1, 0.3), seed=11)
    r1 = monte_carlo_coverage(xs, cfg)
    r2 = monte_carlo_coverage(xs, cfg)
    assert r1.coverage == r2.coverage


def test_coverage_report_table_shape(small_dataset):
    index, schema = small_dataset
    xs = chunk_x_arrays(index, schema, parse_query("SELECT SUM(a1) FROM t"))
    rep = monte_carlo_coverage(xs, CoverageConfig(runs=30, fractions=(0.1, 0.3), seed=1))
    table = rep.format_table()
    lines = table.splitlines()
    assert lines[0].startswith("# coverage runs=30")
    assert lines[1].split() == ["fraction", "bi_level", "chunk_level", "chunk_reorder"]
    assert len(lines) == 4


def test_coverage_requires_enough_runs():
    with pytest.raises(ValueError):
        CoverageConfig(runs=5)


def test_generate_blocked_structure(tmp_path):
    path = str(tmp_path / "blk.csv")
    schema, index = generate_blocked(path, n_chunks=8, per_chunk=64, base=1000, noise=10, seed=2)
    assert index.n_chunks == 8
    assert (index.counts == 64).all()
    rows = [int(line) for line in open(path).read().splitlines()]
    arr = np.array(rows).reshape(8, 64)
    means = arr.mean(axis=1)
    for j in range(8):
        assert abs(means[j] - (j + 1) * 1000) < 15


def test_regime_benchmark_single_pass_deterministic(blocked_dataset):
    index, schema = blocked_dataset
    query = parse_query("SELECT SUM(a1) FROM t", epsilon=0.05, delta_ms=50)
    rows1 = regime_benchmark(index, schema, query, [StrategyKind.SINGLE_PASS], threads=1, seed=4)
    rows2 = regime_benchmark(index, schema, query, [StrategyKind.SINGLE_PASS], threads=1, seed=4)
    a, b = rows1["singlepass"], rows2["singlepass"]
    assert a.chunks_read == b.chunks_read
    assert a.tuples_extracted == b.tuples_extracted
    assert a.chunk_m == b.chunk_m


def test_regime_benchmark_ext_ratios_are_one(small_dataset):
    index, schema = small_dataset
    query = parse_query("SELECT SUM(a1) FROM t", epsilon=0.05, delta_ms=50)
    rows = regime_benchmark(index, schema, query, [StrategyKind.EXT], threads=2, seed=0)
    r = rows["ext"]
    assert r.chunks_read == index.n_chunks
    assert r.tuples_extracted == index.total_tuples
    table = format_benchmark(rows, index.n_chunks, index.total_tuples)
    assert "ext" in table and "1.0000 1.0000" in table
