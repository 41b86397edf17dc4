"""Parallel online aggregation over raw chunked files with bi-level sampling."""

from .controller import QueryController, QueryRun, RunState, run_query
from .estimator import (
    ChunkStats,
    EstimateSnapshot,
    bilevel_estimate,
    bilevel_variance_estimate,
    bilevel_variance_true,
    chunk_estimate,
    chunk_level_estimate,
    confidence_interval,
    local_chunk_interval,
)
from .pipeline import PipelineConfig, ResourceSnapshot
from .query import AggregateQuery, parse_query, x_value
from .store import ChunkIndex, Schema, build_chunk_index, chunk_permutation, generate_synthetic, read_chunk
from .strategies import StrategyKind, TevalController, global_stop
from .synopsis import Answerability, Synopsis

__version__ = "0.1.0"

__all__ = [
    "AggregateQuery",
    "Answerability",
    "ChunkIndex",
    "ChunkStats",
    "EstimateSnapshot",
    "PipelineConfig",
    "QueryController",
    "QueryRun",
    "ResourceSnapshot",
    "RunState",
    "Schema",
    "StrategyKind",
    "Synopsis",
    "TevalController",
    "bilevel_estimate",
    "bilevel_variance_estimate",
    "bilevel_variance_true",
    "build_chunk_index",
    "chunk_estimate",
    "chunk_level_estimate",
    "chunk_permutation",
    "confidence_interval",
    "generate_synthetic",
    "global_stop",
    "local_chunk_interval",
    "parse_query",
    "read_chunk",
    "run_query",
    "x_value",
]
