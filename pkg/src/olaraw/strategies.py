"""Execution strategies and the adaptive evaluation-interval controller.

Strategies:
  ext        exact full scan, sequential order, no estimation until done
  chunk      chunk-level sampling; estimates only over fully completed
             schedule prefixes (reorder barrier)
  holistic   bi-level, chunks always extracted to exhaustion, estimates on
             the shared evaluation cadence
  singlepass bi-level, each chunk finalized at its local accuracy target;
             at most one pass over the data
  resource   singlepass under CPU pressure, keeps extracting while workers
             are idle under I/O pressure
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .estimator import ChunkStats, EstimateSnapshot, REL_WIDTH_FLOOR, local_satisfied
from .pipeline import ResourceSnapshot


class StrategyKind(str, enum.Enum):
    EXT = "ext"
    CHUNK = "chunk"
    HOLISTIC = "holistic"
    SINGLE_PASS = "singlepass"
    RESOURCE_AWARE = "resource"

    @classmethod
    def parse(cls, token: str) -> "StrategyKind":
        try:
            return cls(token.lower())
        except ValueError:
            raise ValueError(
                f"unknown strategy {token!r}; expected one of "
                f"{', '.join(k.value for k in cls)}"
            ) from None


class Decision(enum.Enum):
    CONTINUE = "continue"
    FINALIZE_CHUNK = "finalize"


@dataclass(frozen=True)
class LocalTarget:
    """Per-chunk accuracy target; epsilon_j equals the global epsilon under
    the constant split of the variance budget."""

    epsilon_j: float
    confidence: float
    var_max_j: Optional[float] = None


@dataclass
class TevalController:
    """Shared evaluation interval with exponential decay and calibration.

    Halvings tighten monitoring; each finalized chunk folds its observed
    time-to-local-accuracy into a running mean that becomes the new
    baseline. Bounds: t_min (1 ms) and min(delta, mean full-chunk time).
    """

    delta_ms: float
    t_min: float = 1.0
    t_eval: float = field(default=0.0)
    calib_count: int = 0
    calib_mean: float = 0.0
    full_chunk_count: int = 0
    full_chunk_mean: float = 0.0

    def __post_init__(self):
        if self.t_eval <= 0.0:
            self.t_eval = self.t_min
        self._clamp()

    @property
    def t_max(self) -> float:
        if self.full_chunk_count == 0:
            return self.delta_ms
        return min(self.delta_ms, max(self.full_chunk_mean, self.t_min))

    def _clamp(self) -> None:
        self.t_eval = min(max(self.t_eval, self.t_min), max(self.t_max, self.t_min))

    def halve(self) -> None:
        self.t_eval /= 2.0
        self._clamp()

    def note_full_chunk(self, elapsed_ms: float) -> None:
        self.full_chunk_count += 1
        self.full_chunk_mean += (elapsed_ms - self.full_chunk_mean) / self.full_chunk_count
        self._clamp()

    def note_time_to_accuracy(self, elapsed_ms: float) -> None:
        """Calibration: cumulative running mean resets the baseline."""
        self.calib_count += 1
        self.calib_mean += (elapsed_ms - self.calib_mean) / self.calib_count
        self.t_eval = self.calib_mean
        self._clamp()


def tick_update(
    ctrl: TevalController,
    satisfied: bool,
    first_estimate: bool,
    resources: ResourceSnapshot,
) -> TevalController:
    """Per-tick decay: under I/O pressure halve only once the chunk's local
    accuracy is met; under CPU pressure halve as soon as a first estimate
    exists. Clamps to [t_min, t_max]."""
    if resources.regime == "IO_BOUND":
        if satisfied:
            ctrl.halve()
    else:
        if first_estimate:
            ctrl.halve()
    return ctrl


def chunk_decision(
    kind: StrategyKind,
    stats: ChunkStats,
    target: LocalTarget,
    resources: ResourceSnapshot,
) -> Decision:
    """Per-chunk, per-tick continuation decision."""
    if stats.m >= stats.big_m:
        return Decision.FINALIZE_CHUNK
    if kind in (StrategyKind.EXT, StrategyKind.CHUNK, StrategyKind.HOLISTIC):
        return Decision.CONTINUE
    satisfied = local_satisfied(stats, target.epsilon_j, target.confidence)
    if kind == StrategyKind.SINGLE_PASS:
        return Decision.FINALIZE_CHUNK if satisfied else Decision.CONTINUE
    # RESOURCE_AWARE
    if resources.regime == "CPU_BOUND":
        return Decision.FINALIZE_CHUNK if satisfied else Decision.CONTINUE
    # I/O-bound: spend the idle CPU on more tuples; cede the worker only
    # when another chunk is waiting and nobody is free to take it.
    if resources.buffered_chunks > 0 and resources.idle_workers == 0:
        return Decision.FINALIZE_CHUNK if satisfied else Decision.CONTINUE
    return Decision.CONTINUE


def global_stop(
    snapshot: EstimateSnapshot,
    epsilon: float,
    exact: bool = False,
    abs_width: Optional[float] = None,
    min_chunks: int = 1,
) -> bool:
    """Stop when the half-width meets the relative target (or the optional
    absolute target), or the scan is exact.

    min_chunks guards against honoring near-zero-dof intervals: with n=2
    the between-chunk variance estimate has one degree of freedom and a
    lucky narrow interval says nothing.
    """
    if exact:
        return True
    if snapshot.n < min_chunks:
        return False
    if not math.isfinite(snapshot.var_hat):
        return False
    half = (snapshot.hi - snapshot.lo) / 2.0
    if abs_width is not None and half <= abs_width:
        return True
    if abs(snapshot.tau_hat) < REL_WIDTH_FLOOR:
        return False
    return half <= epsilon * abs(snapshot.tau_hat)


def chunk_reorder_barrier(done_in_schedule_order: Sequence[bool]) -> int:
    """Length of the longest fully-completed schedule prefix; chunk-level
    estimation may use only chunks inside it."""
    n = 0
    for d in done_in_schedule_order:
        if not d:
            break
        n += 1
    return n
