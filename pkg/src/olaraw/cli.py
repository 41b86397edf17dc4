"""Command-line entry points: index, gen, query, bench, coverage, serve."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import harness, store
from .pipeline import PipelineConfig
from .query import parse_query
from .store import ChunkIndex, Schema
from .strategies import StrategyKind
from .synopsis import Synopsis

DEFAULT_COVERAGE_SQL = "SELECT SUM(a1 + 2*a2 + a3) FROM synthetic WHERE a1 BETWEEN 0 AND 500000000"


def data_dir(flag_value: str | None) -> Path:
    env = os.environ.get("OLARAW_DATA_DIR")
    if env:
        return Path(env)
    return Path(flag_value or ".")


def load_dataset(file: str) -> tuple[ChunkIndex, Schema]:
    """Schema from <file>.schema; index from <file>.idx, built on demand."""
    schema = Schema.load(file + ".schema")
    idx_path = Path(file + ".idx")
    if idx_path.exists():
        index = ChunkIndex.load(idx_path, data_path=file)
    else:
        size = os.path.getsize(file)
        index = store.build_chunk_index(file, schema, target_chunk_bytes=max(size // 64, 4096))
    return index, schema


def _cmd_index(args) -> int:
    schema = Schema.load(args.schema or args.file + ".schema")
    if args.chunk_bytes:
        target = args.chunk_bytes
    else:
        target = max(os.path.getsize(args.file) // args.chunks, 1)
    idx = store.build_chunk_index(args.file, schema, target_chunk_bytes=target, delimiter=args.delimiter)
    print(f"indexed {args.file}: {idx.n_chunks} chunks, {idx.total_tuples} tuples, sidecar {args.file}.idx")
    return 0


def _cmd_gen(args) -> int:
    store.generate_synthetic(
        args.out,
        tuples=args.tuples,
        columns=args.columns,
        zipf_lo=args.zipf_lo,
        zipf_hi=args.zipf_hi,
        value_bound=args.value_bound,
        seed=args.seed,
        fmt=args.format,
    )
    schema = Schema.load(args.out + ".schema")
    idx = store.build_chunk_index(args.out, schema, target_chunk_bytes=max(os.path.getsize(args.out) // args.chunks, 1))
    print(f"generated {args.out}: {args.tuples} tuples x {args.columns} cols, {idx.n_chunks} chunks")
    return 0


def _cmd_query(args) -> int:
    index, schema = load_dataset(args.file)
    q = parse_query(
        args.sql,
        schema_columns=list(schema.names),
        epsilon=args.epsilon,
        delta_ms=args.delta,
        confidence=args.confidence,
    )
    cfg = PipelineConfig(
        threads=args.threads,
        buffer_capacity=args.buffer,
        per_tuple_cost=args.cost,
        seed=args.seed,
    )
    synopsis = None
    if args.synopsis_budget_mb > 0:
        row_bytes = 8 * max(len(q.columns), 1)
        synopsis = Synopsis(
            budget_tuples=int(args.synopsis_budget_mb * 2**20) // row_bytes,
            columns=q.columns,
            file_path=index.path,
            origin_schedule=[],
        )
    strategy = StrategyKind.parse(args.strategy)

    def emit(snapshot, line):
        print(line, flush=True)

    header_printed = False
    run = None
    try:
        from .controller import QueryController

        ctl = QueryController(index, schema, q, strategy, cfg, synopsis, on_snapshot=emit)
        print(ctl.run.trace_header(), flush=True)
        header_printed = True
        run = ctl.execute()
    except KeyboardInterrupt:
        return 1
    print(f"# terminal state={run.state} chunks_read={run.chunks_read} "
          f"tuples={run.tuples_extracted} wall_s={run.wall_time_s:.3f}", flush=True)
    if run.state == "FAILED":
        print(f"# error: {run.error}", file=sys.stderr)
        return 1
    return 0


def _cmd_bench(args) -> int:
    index, schema = load_dataset(args.file)
    q = parse_query(args.sql, schema_columns=list(schema.names), epsilon=args.epsilon, delta_ms=args.delta)
    strategies = [StrategyKind.parse(s) for s in args.strategies.split(",")]
    rows = harness.regime_benchmark(
        index, schema, q, strategies, threads=args.threads, per_tuple_cost=args.cost, seed=args.seed
    )
    print(harness.format_benchmark(rows, index.n_chunks, index.total_tuples))
    return 0


def _ensure_default_synthetic(base: Path) -> str:
    base.mkdir(parents=True, exist_ok=True)
    f = base / "synthetic-64x4096x16.csv"
    if not f.exists():
        store.generate_synthetic(str(f), tuples=64 * 4096, columns=16, seed=42)
        schema = Schema.load(str(f) + ".schema")
        store.build_chunk_index(str(f), schema, target_chunk_bytes=max(os.path.getsize(f) // 64, 1))
    return str(f)


def _cmd_coverage(args) -> int:
    file = args.file or _ensure_default_synthetic(data_dir(args.data_dir))
    index, schema = load_dataset(file)
    q = parse_query(args.sql, schema_columns=list(schema.names))
    xs = harness.chunk_x_arrays(index, schema, q)
    cfg = harness.CoverageConfig(
        runs=args.runs,
        confidence=args.confidence,
        workers=args.workers,
        seed=args.seed,
    )
    report = harness.monte_carlo_coverage(xs, cfg)
    print(report.format_table())
    if args.out:
        Path(args.out).write_text(report.format_table() + "\n")
    return 0


def _cmd_serve(args) -> int:
    from .service import ServiceConfig, serve

    cfg = ServiceConfig(
        host=args.host,
        port=args.port,
        data_dir=str(data_dir(args.data_dir)),
        default_threads=args.threads,
        default_epsilon=args.epsilon,
        default_delta_ms=args.delta,
        default_confidence=args.confidence,
        synopsis_budget_mb=args.synopsis_budget_mb,
    )
    serve(cfg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="olaraw", description="Online aggregation over raw chunked files")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("index", help="build a chunk index sidecar")
    p.add_argument("--file", required=True)
    p.add_argument("--schema")
    p.add_argument("--chunk-bytes", type=int, dest="chunk_bytes")
    p.add_argument("--chunks", type=int, default=64)
    p.add_argument("--delimiter", default=",")
    p.set_defaults(fn=_cmd_index)

    p = sub.add_parser("gen", help="generate a synthetic zipf dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--tuples", type=int, default=64 * 4096)
    p.add_argument("--columns", type=int, default=16)
    p.add_argument("--zipf-lo", type=float, default=0.0)
    p.add_argument("--zipf-hi", type=float, default=4.0)
    p.add_argument("--value-bound", type=int, default=999_999_999)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "bin"), default="csv")
    p.add_argument("--chunks", type=int, default=64)
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("query", help="run one aggregate query, streaming trace lines")
    p.add_argument("--file", required=True)
    p.add_argument("--sql", required=True)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--delta", type=float, default=1000.0)
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("--buffer", type=int, default=4)
    p.add_argument("--strategy", default="resource")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cost", type=float, default=0.0, help="injected CPU seconds per tuple")
    p.add_argument("--synopsis-budget-mb", type=float, default=0.0)
    p.set_defaults(fn=_cmd_query)

    p = sub.add_parser("bench", help="compare strategies under one configuration")
    p.add_argument("--file", required=True)
    p.add_argument("--sql", required=True)
    p.add_argument("--strategies", default="ext,chunk,holistic,singlepass,resource")
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("--cost", type=float, default=0.0)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--delta", type=float, default=1000.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("coverage", help="Monte Carlo confidence-bound coverage report")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--file")
    p.add_argument("--sql", default=DEFAULT_COVERAGE_SQL)
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--workers", type=int, default=5)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--data-dir")
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_coverage)

    p = sub.add_parser("serve", help="start the HTTP control service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--data-dir")
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--delta", type=float, default=1000.0)
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--synopsis-budget-mb", type=float, default=32.0)
    p.set_defaults(fn=_cmd_serve)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
