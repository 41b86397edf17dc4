"""Query lifecycle orchestration.

One controller per query run. It owns the schedule, the shared evaluation
interval, estimation, strategy decisions, synopsis maintenance, and the
trace stream. Workers only extract; every decision and every estimate
happens here (the one exception: the single-pass local stop is evaluated
at worker batch boundaries so its sampling pattern is timing-free).
"""

from __future__ import annotations

import dataclasses
import math
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels, store
from .estimator import (
    ChunkStats,
    EstimateSnapshot,
    local_satisfied,
    make_snapshot,
    within_chunk_variance,
)
from .pipeline import ChunkPipeline, ExtractTask, PipelineConfig, ResourceSnapshot, TaskView, TupleExtractor, in_chunk_permutation
from .query import AggregateQuery
from .store import ChunkIndex, Schema, chunk_permutation
from .strategies import (
    Decision,
    LocalTarget,
    StrategyKind,
    TevalController,
    chunk_decision,
    chunk_reorder_barrier,
    global_stop,
    tick_update,
)
from .synopsis import Answerability, Synopsis

TRACE_FIELDS = (
    "timestamp_ms",
    "estimate",
    "lo",
    "hi",
    "error_ratio",
    "n_chunks",
    "tuples",
    "chunks_read",
    "bytes_read",
    "regime",
)


class RunState:
    RUNNING = "RUNNING"
    SATISFIED = "SATISFIED"
    STOPPED_BY_USER = "STOPPED_BY_USER"
    EXACT_COMPLETE = "EXACT_COMPLETE"
    FAILED = "FAILED"

    TERMINAL = (SATISFIED, STOPPED_BY_USER, EXACT_COMPLETE, FAILED)


def format_trace_line(s: EstimateSnapshot) -> str:
    parts = [
        f"timestamp_ms={s.timestamp_ms:.3f}",
        f"estimate={s.tau_hat!r}",
        f"lo={s.lo!r}",
        f"hi={s.hi!r}",
        f"error_ratio={s.error_ratio!r}",
        f"n_chunks={s.n}",
        f"tuples={s.tuples}",
        f"chunks_read={s.chunks_read}",
        f"bytes_read={s.bytes_read}",
        f"regime={s.regime}",
    ]
    if s.group is not None:
        parts.append(f"group={s.group}")
    if s.stale:
        parts.append("stale=1")
    return " ".join(parts)


def parse_trace_line(line: str) -> dict:
    out = {}
    for kv in line.split():
        k, v = kv.split("=", 1)
        out[k] = v
    for k in ("timestamp_ms", "estimate", "lo", "hi", "error_ratio"):
        if k in out:
            out[k] = float(out[k])
    for k in ("n_chunks", "tuples", "chunks_read", "bytes_read", "group"):
        if k in out:
            out[k] = int(out[k])
    return out


@dataclass
class QueryRun:
    run_id: str
    query: AggregateQuery
    strategy: StrategyKind
    config: PipelineConfig
    state: str = RunState.RUNNING
    snapshots: list[EstimateSnapshot] = field(default_factory=list)
    trace_lines: list[str] = field(default_factory=list)
    schedule: tuple[int, ...] = ()
    chunks_read: int = 0  # raw reads, including reader prefetch
    bytes_read: int = 0
    chunks_extracted: int = 0  # chunks that contributed extracted tuples
    tuples_extracted: int = 0
    chunk_m: dict[int, int] = field(default_factory=dict)
    tainted: bool = False
    exact_value: Optional[float] = None
    error: Optional[str] = None
    wall_time_s: float = 0.0
    t_eval_trace: list[float] = field(default_factory=list)

    @property
    def final_snapshot(self) -> Optional[EstimateSnapshot]:
        return self.snapshots[-1] if self.snapshots else None

    def trace_header(self) -> str:
        return (
            f"# run={self.run_id} strategy={self.strategy.value} seed={self.config.seed} "
            f"epsilon={self.query.epsilon} delta_ms={self.query.delta_ms} "
            f"confidence={self.query.confidence} sql={self.query.to_sql()!r}"
        )


class QueryController:
    """Drives one query run to a terminal state."""

    def __init__(
        self,
        index: ChunkIndex,
        schema: Schema,
        query: AggregateQuery,
        strategy: StrategyKind,
        config: PipelineConfig,
        synopsis: Optional[Synopsis] = None,
        on_snapshot: Optional[Callable[[EstimateSnapshot, str], None]] = None,
        min_stop_chunks: int = 4,
    ):
        self.index = index
        self.schema = schema
        self.query = query
        self.strategy = strategy
        self.config = config
        self.synopsis = synopsis
        self.on_snapshot = on_snapshot
        self.extractor = TupleExtractor(schema, query)
        self.target = LocalTarget(epsilon_j=query.epsilon, confidence=query.confidence)
        # Relative-width stops are honored only once enough chunks back the
        # between-chunk variance estimate (1-dof intervals stop nothing).
        self.min_stop_chunks = min(min_stop_chunks, index.n_chunks)
        self.teval = TevalController(delta_ms=query.delta_ms)
        self.run = QueryRun(
            run_id=uuid.uuid4().hex[:12],
            query=query,
            strategy=strategy,
            config=config,
        )
        self.stop_event = threading.Event()
        self._lock = threading.Lock()
        self._pending_terminal: Optional[str] = None
        self._pending_snaps: list[EstimateSnapshot] = []
        self._last_emit_ms = -math.inf
        self._last_emitted_key = None
        self._first_seen: set[int] = set()
        self._local_done: set[int] = set()
        self._base_chunks_read = 0
        self._base_bytes_read = 0
        self._base_tuples = 0
        self._base_chunks_extracted = 0
        self._t0 = time.perf_counter()

    # ------------------------------------------------------------- helpers

    def now_ms(self) -> float:
        return (time.perf_counter() - self._t0) * 1000.0

    def stop(self) -> str:
        """User stop; honored at the next tick. Idempotent."""
        self.stop_event.set()
        return self.run.state

    def _stats_from_view(self, v: TaskView, group: Optional[int] = None) -> ChunkStats:
        if group is None:
            return ChunkStats(v.chunk_id, v.n_records, v.m, v.y1, v.y2, v.c1)
        g = (v.groups or {}).get(group)
        y1, y2, c1 = g if g is not None else (0.0, 0.0, 0.0)
        return ChunkStats(v.chunk_id, v.n_records, v.m, y1, y2, c1)

    def _usable_prefix(self, views: list[TaskView]) -> list[TaskView]:
        """Longest schedule prefix of chunks that can carry a finite
        interval: m >= 2, or the chunk fully extracted."""
        out = []
        for v in views:
            if v.m >= 2 or (v.done and v.m >= 1 and v.cursor >= v.n_records):
                out.append(v)
            else:
                break
        return out

    def _snapshot(
        self,
        stats: list[ChunkStats],
        resources: Optional[ResourceSnapshot],
        group: Optional[int] = None,
        exact: bool = False,
        chunks_read: Optional[int] = None,
        bytes_read: Optional[int] = None,
    ) -> EstimateSnapshot:
        s = make_snapshot(stats, self.index.n_chunks, self.query.confidence, self.query.kind)
        if exact:
            s.var_hat = 0.0
            s.lo = s.hi = s.tau_hat
            s.error_ratio = 0.0
        s.chunks_read = self.run.chunks_read if chunks_read is None else chunks_read
        s.bytes_read = self.run.bytes_read if bytes_read is None else bytes_read
        s.timestamp_ms = self.now_ms()
        s.regime = resources.regime if resources is not None else "IO_BOUND"
        s.group = group
        s.t_eval_ms = self.teval.t_eval
        return s

    def _emit(self, snaps: list[EstimateSnapshot], force: bool = False) -> None:
        if not snaps:
            return
        now = snaps[0].timestamp_ms
        if not force and now - self._last_emit_ms < self.query.delta_ms:
            return
        key = tuple((s.n, s.tuples, s.group) for s in snaps)
        stale = key == self._last_emitted_key
        self._last_emit_ms = now
        self._last_emitted_key = key
        for s in snaps:
            s.stale = stale and not force
            self.run.snapshots.append(s)
            line = format_trace_line(s)
            self.run.trace_lines.append(line)
            if self.on_snapshot is not None:
                self.on_snapshot(s, line)

    def _finish(self, state: str, snaps: list[EstimateSnapshot]) -> None:
        self._emit(snaps, force=True)
        self.run.state = state
        self.run.wall_time_s = time.perf_counter() - self._t0

    # --------------------------------------------------------------- entry

    def execute(self) -> QueryRun:
        try:
            if self.strategy == StrategyKind.EXT:
                return self._run_ext()
            if (
                self.synopsis is not None
                and self.query.group_column is None
                and self.synopsis.can_answer(self.query, self.index.n_chunks, self.index.path)
                != Answerability.REBUILD
            ):
                return self._run_from_synopsis()
            return self._run_pipeline(rebuild_synopsis=self.synopsis is not None)
        except Exception as exc:  # pragma: no cover - defensive terminal state
            self.run.error = f"{type(exc).__name__}: {exc}"
            self.run.state = RunState.FAILED
            self.run.wall_time_s = time.perf_counter() - self._t0
            return self.run

    # ----------------------------------------------------------------- EXT

    def _run_ext(self) -> QueryRun:
        schedule = np.arange(self.index.n_chunks)
        self.run.schedule = tuple(int(j) for j in schedule)
        pipe = ChunkPipeline(
            self.index,
            self.schema,
            self.extractor,
            schedule,
            self.config,
            sequential_tuples=True,
            exact_int=True,
        )
        pipe.start()
        while not pipe.all_done:
            if self.stop_event.is_set():
                pipe.request_stop()
                break
            time.sleep(min(self.query.delta_ms, 50.0) / 1000.0)
            self._sync_counters(pipe)
            views = pipe.snapshot_in_order()
            partial = math.fsum(v.y1 for v in views)
            s = EstimateSnapshot(
                tau_hat=partial,
                var_hat=math.inf,
                lo=-math.inf,
                hi=math.inf,
                error_ratio=math.inf,
                n=len(views),
                tuples=sum(v.m for v in views),
                chunks_read=self.run.chunks_read,
                bytes_read=self.run.bytes_read,
                timestamp_ms=self.now_ms(),
                regime=pipe.snapshot_resources().regime,
            )
            self._emit([s])
        pipe.request_stop()
        pipe.join()
        self._sync_counters(pipe)
        if pipe.error is not None:
            self.run.error = pipe.error
            self._finish(RunState.FAILED, [])
            return self.run
        if self.stop_event.is_set() and not pipe.all_done:
            self._finish(RunState.STOPPED_BY_USER, [])
            return self.run
        tasks = [t for t in pipe.tasks if t is not None]
        self.run.tainted = any(t.rejects > 0 for t in tasks)
        if pipe.exact_int:
            total_y = sum(t.y1_int for t in tasks)
            total_c = sum(t.c1_int for t in tasks)
        else:
            total_y = math.fsum(t.y1 for t in tasks)
            total_c = math.fsum(t.c1 for t in tasks)
        if self.query.kind == "AVG":
            value = float(total_y) / float(total_c) if total_c else math.nan
        else:
            value = total_y
        self.run.exact_value = value
        s = EstimateSnapshot(
            tau_hat=float(value),
            var_hat=0.0,
            lo=float(value),
            hi=float(value),
            error_ratio=0.0,
            n=len(tasks),
            tuples=sum(t.m for t in tasks),
            chunks_read=self.run.chunks_read,
            bytes_read=self.run.bytes_read,
            timestamp_ms=self.now_ms(),
            regime="IO_BOUND",
        )
        self._finish(RunState.EXACT_COMPLETE, [s])
        return self.run

    # ------------------------------------------------------------ sampling

    def _local_rule(self, task: ExtractTask) -> bool:
        st = ChunkStats(task.chunk_id, task.n_records, task.m, task.y1, task.y2, task.c1)
        if task.m < 1:
            return False
        return local_satisfied(st, self.target.epsilon_j, self.target.confidence)

    def _on_task_done(self, task: ExtractTask, pipe: ChunkPipeline) -> None:
        """Synchronous end-of-chunk bookkeeping: calibration, synopsis
        insertion, and the timing-free global check over the finalized
        schedule prefix."""
        elapsed_ms = (task.end_ts - task.start_ts) * 1000.0 if task.end_ts else 0.0
        with self._lock:
            if task.cursor >= task.n_records:
                self.teval.note_full_chunk(elapsed_ms)
            if task.finalized_by_rule and task.first_satisfied_ts is not None:
                self.teval.note_time_to_accuracy((task.first_satisfied_ts - task.start_ts) * 1000.0)
            self._maybe_insert_synopsis(task)
            if self._pending_terminal is not None or self.strategy == StrategyKind.EXT:
                return
            done_prefix = []
            for t in pipe.tasks:
                if t is None:
                    break
                m, y1, y2, c1, rej, cur, done, _ = t.published
                if not done or m < 1:
                    break
                done_prefix.append(ChunkStats(t.chunk_id, t.n_records, m, y1, y2, c1))
            if len(done_prefix) < 1 or self.query.group_column is not None:
                return
            snap = self._snapshot(done_prefix, None)
            if global_stop(snap, self.query.epsilon, min_chunks=self.min_stop_chunks):
                self._pending_terminal = RunState.SATISFIED
                self._pending_snaps = [snap]
                pipe.request_stop()

    def _maybe_insert_synopsis(self, task: ExtractTask) -> None:
        syn = self.synopsis
        if (
            syn is None
            or self.query.group_column is not None
            or task.rejects > 0
            or task.m < 1
            or task.chunk_id in syn.chunks
            or not task.retained
        ):
            return
        values = np.concatenate(task.retained, axis=0)
        if task.sequential:
            # Window semantics require permutation order; a sequentially
            # extracted chunk can only be cached when complete, reordered.
            if task.cursor < task.n_records:
                return
            perm = in_chunk_permutation((self.config.seed, task.chunk_id), task.n_records)
            values = values[perm]
        st = ChunkStats(task.chunk_id, task.n_records, task.m, task.y1, task.y2, task.c1)
        v = within_chunk_variance(st)
        syn.insert_chunk(
            task.chunk_id,
            values,
            tuple_seed=(self.config.seed, task.chunk_id),
            n_records=task.n_records,
            local_variance=v if math.isfinite(v) else 0.0,
        )

    def _sync_counters(self, pipe: ChunkPipeline) -> None:
        self.run.chunks_read = pipe.chunks_read + self._base_chunks_read
        self.run.bytes_read = pipe.bytes_read + self._base_bytes_read
        total = 0
        used = 0
        for t in pipe.tasks:
            if t is None:
                continue
            total += t.published[5]
            used += int(t.published[5] > 0)
            if t.published[0] > 0:
                self.run.chunk_m[t.chunk_id] = t.published[0]
        self.run.tuples_extracted = total + self._base_tuples
        self.run.chunks_extracted = used + self._base_chunks_extracted

    def _group_keys(self, views: list[TaskView]) -> list[int]:
        keys: set[int] = set()
        for v in views:
            if v.groups:
                keys.update(v.groups.keys())
        return sorted(keys)

    def _build_snapshots(
        self, views: list[TaskView], resources: ResourceSnapshot, exact: bool
    ) -> tuple[list[EstimateSnapshot], bool]:
        """Snapshots (one per group; single otherwise) over the usable
        prefix, plus whether the global stop rule holds for all of them."""
        if self.strategy == StrategyKind.CHUNK:
            n_done = chunk_reorder_barrier([v.done and v.cursor >= v.n_records for v in views])
            usable = views[:n_done]
        elif self.strategy == StrategyKind.SINGLE_PASS:
            # Frozen finalized-chunk prefixes keep single-pass timing-free:
            # its estimation sequence depends only on data and seeds.
            n_done = chunk_reorder_barrier([v.done and v.m >= 1 for v in views])
            usable = views[:n_done]
        else:
            usable = self._usable_prefix(views)
        if not usable:
            s = EstimateSnapshot(
                tau_hat=math.nan,
                var_hat=math.inf,
                lo=-math.inf,
                hi=math.inf,
                error_ratio=math.inf,
                n=0,
                tuples=0,
                timestamp_ms=self.now_ms(),
                regime=resources.regime,
            )
            s.chunks_read = self.run.chunks_read
            s.bytes_read = self.run.bytes_read
            return [s], False
        if self.query.group_column is None:
            stats = [self._stats_from_view(v) for v in usable]
            snap = self._snapshot(stats, resources, exact=exact)
            return [snap], global_stop(snap, self.query.epsilon, exact=exact, min_chunks=self.min_stop_chunks)
        snaps = []
        all_ok = True
        for g in self._group_keys(views):
            stats = [self._stats_from_view(v, group=g) for v in usable]
            snap = self._snapshot(stats, resources, group=g, exact=exact)
            snaps.append(snap)
            all_ok = all_ok and global_stop(snap, self.query.epsilon, exact=exact, min_chunks=self.min_stop_chunks)
        if not snaps:
            return self._build_snapshots_no_groups(usable, resources, exact)
        return snaps, all_ok

    def _build_snapshots_no_groups(self, usable, resources, exact):
        stats = [self._stats_from_view(v) for v in usable]
        snap = self._snapshot(stats, resources, exact=exact)
        return [snap], global_stop(snap, self.query.epsilon, exact=exact, min_chunks=self.min_stop_chunks)

    def _run_pipeline(self, rebuild_synopsis: bool = False) -> QueryRun:
        if rebuild_synopsis and self.synopsis is not None and self.query.group_column is None:
            # The cached sample cannot serve this query: rebuild from scratch.
            schedule = chunk_permutation(self.config.seed, self.index.n_chunks)
            syn = self.synopsis
            syn.chunks.clear()
            syn.insertion_order.clear()
            syn.columns = tuple(self.query.columns)
            syn.origin_schedule = tuple(int(j) for j in schedule)
            syn.origin_query_id = self.run.run_id
            syn.file_path = self.index.path
            retain = True
        else:
            schedule = chunk_permutation(self.config.seed, self.index.n_chunks)
            retain = self.synopsis is not None and self.query.group_column is None
        self.run.schedule = tuple(int(j) for j in schedule)

        cfg = self.config
        if retain and not cfg.retain_values:
            cfg = dataclasses.replace(cfg, retain_values=True)
        local_rule = self._local_rule if self.strategy == StrategyKind.SINGLE_PASS else None
        pipe = ChunkPipeline(
            self.index,
            self.schema,
            self.extractor,
            schedule,
            cfg,
            local_rule=local_rule,
            on_task_done=lambda t: self._on_task_done(t, pipe),
            sequential_tuples=self.strategy in (StrategyKind.CHUNK,),
        )
        pipe.start()
        terminal: Optional[str] = None
        last_snaps: list[EstimateSnapshot] = []
        while True:
            tick_s = max(self.teval.t_eval, self.teval.t_min) / 1000.0
            time.sleep(min(tick_s, 0.05))
            self._sync_counters(pipe)
            if pipe.error is not None:
                terminal = RunState.FAILED
                self.run.error = pipe.error
                pipe.request_stop()
                break
            if self.stop_event.is_set():
                terminal = RunState.STOPPED_BY_USER
                pipe.request_stop()
                break
            resources = pipe.snapshot_resources()
            views = pipe.snapshot_in_order()
            exact = len(views) == self.index.n_chunks and all(
                v.done and v.cursor >= v.n_records for v in views
            )
            snaps, satisfied = self._build_snapshots(views, resources, exact)
            last_snaps = snaps
            self._tick_decisions(pipe, views, resources)
            if satisfied:
                terminal = RunState.EXACT_COMPLETE if exact else RunState.SATISFIED
                pipe.request_stop()
                break
            with self._lock:
                if self._pending_terminal is not None:
                    terminal = self._pending_terminal
                    last_snaps = self._pending_snaps
                    break
            if pipe.all_done:
                break
            self._emit(snaps)
            self.run.t_eval_trace.append(self.teval.t_eval)
        pipe.join()
        self._sync_counters(pipe)
        with self._lock:
            if terminal is None and self._pending_terminal is not None:
                terminal = self._pending_terminal
                last_snaps = self._pending_snaps
        self.run.tainted = any(t is not None and t.rejects > 0 for t in pipe.tasks)

        if terminal is None:
            # Pass completed without an early stop: classify the end state.
            resources = pipe.snapshot_resources()
            views = pipe.snapshot_in_order()
            exact = len(views) == self.index.n_chunks and all(
                v.done and v.cursor >= v.n_records for v in views
            )
            snaps, satisfied = self._build_snapshots(views, resources, exact)
            if exact:
                terminal = RunState.EXACT_COMPLETE
            elif satisfied:
                terminal = RunState.SATISFIED
            else:
                terminal = RunState.FAILED
                self.run.error = "accuracy target unreachable: sampling pass completed unsatisfied"
            last_snaps = snaps
        self._finish(terminal, last_snaps)
        return self.run

    def _tick_decisions(self, pipe: ChunkPipeline, views: list[TaskView], resources: ResourceSnapshot) -> None:
        """Resource-aware finalization and shared-interval decay."""
        for v in views:
            if v.done or v.m < 1:
                continue
            task = pipe.tasks[v.sched_pos]
            if task is None or task.finalize_requested:
                continue
            st = self._stats_from_view(v)
            satisfied = v.m >= 2 and local_satisfied(st, self.target.epsilon_j, self.target.confidence)
            first = v.chunk_id not in self._first_seen
            if first:
                self._first_seen.add(v.chunk_id)
            tick_update(self.teval, satisfied, first, resources)
            if satisfied and v.chunk_id not in self._local_done:
                self._local_done.add(v.chunk_id)
                if task.first_satisfied_ts is None:
                    task.first_satisfied_ts = time.perf_counter()
            if self.strategy == StrategyKind.RESOURCE_AWARE:
                if chunk_decision(self.strategy, st, self.target, resources) == Decision.FINALIZE_CHUNK:
                    task.finalized_by_rule = True
                    task.finalize_requested = True

    # ------------------------------------------------------------ synopsis

    def _refetch(self, sc, ring: np.ndarray) -> np.ndarray:
        """Circular-scan fetch: read the chunk, extract the permutation
        positions `ring` for the synopsis columns."""
        chunk = store.read_chunk(self.index, sc.chunk_id)
        self._base_chunks_read += 1
        self._base_bytes_read += int(self.index.lengths[sc.chunk_id])
        self.run.chunks_read = self._base_chunks_read
        self.run.bytes_read = self._base_bytes_read
        perm = in_chunk_permutation(sc.tuple_seed, sc.n_records)
        rows = perm[ring]
        starts, ends = chunk.record_bounds()
        col_idx = np.array(
            sorted(self.schema.column_index(c) for c in self.synopsis.columns), dtype=np.int64
        )
        if chunk.fmt == "csv":
            vals, status = kernels.parse_rows_f64(
                chunk.data, starts, ends, rows, col_idx, len(self.schema.names), chunk.delim
            )
        else:
            vals, status = store.decode_rows_binary(chunk, self.schema, rows, col_idx)
        if status.any():
            self.run.tainted = True
        self._base_tuples += rows.size
        self.run.tuples_extracted = self._base_tuples
        return vals

    def _syn_snapshot(self, included: list[int], exact: bool) -> EstimateSnapshot:
        stats = [self.synopsis.chunk_stats(self.query, j) for j in included]
        snap = self._snapshot(stats, None, exact=exact)
        return snap

    def _syn_prefix_walk(self, included: list[int], exact_all: bool) -> tuple[EstimateSnapshot, bool]:
        """Replay estimation over growing prefixes of the cached sequence,
        mirroring how the origin run included chunks; return the first
        satisfying snapshot, else the full-set snapshot."""
        stats = [self.synopsis.chunk_stats(self.query, j) for j in included]
        for k in range(1, len(stats) + 1):
            exact = exact_all and k == len(stats)
            snap = self._snapshot(stats[:k], None, exact=exact)
            if global_stop(snap, self.query.epsilon, exact=exact, min_chunks=self.min_stop_chunks):
                return snap, True
        return self._snapshot(stats, None, exact=exact_all), False

    def _run_from_synopsis(self) -> QueryRun:
        try:
            return self._run_from_synopsis_inner()
        finally:
            # During the run windows may exceed the budget (working sample);
            # the retained synopsis is pruned back once the query ends.
            if self.synopsis is not None:
                self.synopsis.enforce_budget()

    def _run_from_synopsis_inner(self) -> QueryRun:
        syn = self.synopsis
        assert syn is not None
        mode = syn.can_answer(self.query, self.index.n_chunks, self.index.path)
        self.run.schedule = syn.origin_schedule
        unsat = [
            j
            for j in syn.chunks
            if not syn.chunks[j].exhausted
            and not local_satisfied(syn.chunk_stats(self.query, j), self.query.epsilon, self.query.confidence)
        ]
        plan = syn.plan_access_order(mode, self.index.n_chunks, unsatisfied=unsat)

        included = [j for j in syn.origin_schedule if j in syn.chunks]
        exact_all = len(included) == self.index.n_chunks and all(
            syn.chunks[j].exhausted for j in included
        )
        snap, satisfied = self._syn_prefix_walk(included, exact_all)
        if self.stop_event.is_set():
            self._finish(RunState.STOPPED_BY_USER, [snap])
            return self.run
        if satisfied:
            self._update_syn_variances(included)
            state = RunState.EXACT_COMPLETE if snap.error_ratio == 0.0 and exact_all else RunState.SATISFIED
            self._finish(state, [snap])
            return self.run
        self._emit([snap], force=True)

        # Missing chunks from raw, in the original schedule order.
        if plan.missing:
            state = self._consume_missing(plan.missing)
            if state is not None:
                return self.run

        # Still unsatisfied: extend cached windows by the circular scan,
        # highest stored variance first.
        order = plan.deferred or sorted(
            (j for j in syn.chunks if not syn.chunks[j].exhausted),
            key=lambda j: (-syn.chunks[j].variance, j),
        )
        while True:
            if self.stop_event.is_set():
                self._finish(RunState.STOPPED_BY_USER, [self._syn_snapshot(sorted(syn.chunks), False)])
                return self.run
            included = [j for j in syn.origin_schedule if j in syn.chunks]
            exact = len(included) == self.index.n_chunks and all(
                syn.chunks[j].exhausted for j in included
            )
            snap, satisfied = self._syn_prefix_walk(included, exact)
            if satisfied:
                self._update_syn_variances(included)
                state = RunState.EXACT_COMPLETE if snap.error_ratio == 0.0 and exact else RunState.SATISFIED
                self._finish(state, [snap])
                return self.run
            self._emit([snap])
            candidates = [j for j in order if j in syn.chunks and not syn.chunks[j].exhausted]
            if not candidates:
                candidates = sorted(
                    (j for j in syn.chunks if not syn.chunks[j].exhausted),
                    key=lambda j: (-syn.chunks[j].variance, j),
                )
            if not candidates:
                # Everything cached is exact; nothing more to extract.
                self._update_syn_variances(included)
                self._finish(RunState.EXACT_COMPLETE if exact else RunState.FAILED, [snap])
                if not exact:
                    self.run.error = "accuracy target unreachable from a complete synopsis"
                return self.run
            j = candidates[0]
            sc = syn.chunks[j]
            step = max(self.config.batch_tuples, sc.length)
            syn.resample_chunk(j, step, self._refetch, rebalance=False)
            st = syn.chunk_stats(self.query, j)
            syn.chunks[j].variance = _finite(within_chunk_variance(st))
            if local_satisfied(st, self.query.epsilon, self.query.confidence) or sc.exhausted:
                order = [o for o in order if o != j]

    def _consume_missing(self, missing: list[int]) -> Optional[str]:
        """Pipeline over the not-cached chunks; estimation merges cached and
        freshly finalized chunks. Returns a terminal state if reached."""
        syn = self.synopsis
        cfg = dataclasses.replace(self.config, retain_values=True)
        self._base_chunks_read = self.run.chunks_read
        self._base_bytes_read = self.run.bytes_read
        self._base_tuples = self.run.tuples_extracted
        self._base_chunks_extracted = self.run.chunks_extracted
        local_rule = self._local_rule if self.strategy == StrategyKind.SINGLE_PASS else None
        pipe = ChunkPipeline(
            self.index,
            self.schema,
            self.extractor,
            np.array(missing),
            cfg,
            local_rule=local_rule,
            sequential_tuples=self.strategy in (StrategyKind.CHUNK,),
        )
        # New chunks insert into the synopsis as they finalize.
        pipe.on_task_done = lambda t: self._maybe_insert_synopsis(t)
        pipe.start()
        terminal = None
        while True:
            tick_s = max(self.teval.t_eval, self.teval.t_min) / 1000.0
            time.sleep(min(tick_s, 0.05))
            self._sync_counters(pipe)
            if pipe.error is not None:
                self.run.error = pipe.error
                terminal = RunState.FAILED
                pipe.request_stop()
                break
            if self.stop_event.is_set():
                terminal = RunState.STOPPED_BY_USER
                pipe.request_stop()
                break
            resources = pipe.snapshot_resources()
            snap, satisfied, exact = self._merged_snapshot(pipe, resources)
            self._tick_decisions(pipe, pipe.snapshot_in_order(), resources)
            if satisfied:
                terminal = RunState.EXACT_COMPLETE if exact else RunState.SATISFIED
                pipe.request_stop()
                break
            if pipe.all_done:
                break
            self._emit([snap])
        pipe.join()
        self._sync_counters(pipe)
        for t in pipe.tasks:
            if t is not None and t.done:
                self._maybe_insert_synopsis(t)
        if terminal in (RunState.FAILED, RunState.STOPPED_BY_USER):
            snap, _, _ = self._merged_snapshot(pipe, None)
            self._finish(terminal, [snap])
            return terminal
        if terminal is not None:
            snap, _, exact = self._merged_snapshot(pipe, None)
            self._finish(terminal, [snap])
            return terminal
        return None  # pass over missing chunks done, still unsatisfied

    def _merged_snapshot(self, pipe: ChunkPipeline, resources) -> tuple[EstimateSnapshot, bool, bool]:
        syn = self.synopsis
        stats = [syn.chunk_stats(self.query, j) for j in syn.origin_schedule if j in syn.chunks]
        covered = {s.chunk_id for s in stats}
        views = self._usable_prefix(pipe.snapshot_in_order())
        for v in views:
            if v.chunk_id not in covered:
                stats.append(self._stats_from_view(v))
                covered.add(v.chunk_id)
        exact_new = all(v.done and v.cursor >= v.n_records for v in pipe.snapshot_in_order()) and len(
            pipe.snapshot_in_order()
        ) == len(pipe.tasks)
        exact = (
            len(covered) == self.index.n_chunks
            and all(syn.chunks[j].exhausted for j in syn.chunks)
            and exact_new
        )
        snap = self._snapshot(stats, resources, exact=exact)
        return snap, global_stop(snap, self.query.epsilon, exact=exact, min_chunks=self.min_stop_chunks), exact

    def _update_syn_variances(self, included: list[int]) -> None:
        syn = self.synopsis
        for j in included:
            st = syn.chunk_stats(self.query, j)
            syn.chunks[j].variance = _finite(within_chunk_variance(st))


def _finite(v: float) -> float:
    return float(v) if math.isfinite(v) else 0.0


def run_query(
    index: ChunkIndex,
    schema: Schema,
    query: AggregateQuery,
    strategy: StrategyKind,
    config: PipelineConfig,
    synopsis: Optional[Synopsis] = None,
    on_snapshot: Optional[Callable[[EstimateSnapshot, str], None]] = None,
    min_stop_chunks: int = 4,
) -> QueryRun:
    """Run a query to a terminal state, streaming snapshots through
    `on_snapshot` at the reporting cadence."""
    ctl = QueryController(index, schema, query, strategy, config, synopsis, on_snapshot, min_stop_chunks)
    return ctl.execute()
