"""Overlapped READ/EXTRACT pipeline.

One reader thread fills a bounded chunk buffer in the predetermined
schedule order; P workers pull chunks off the buffer (hence start them in
schedule order) and extract tuples in a per-chunk random order,
publishing (m, y1, y2, c1) snapshots atomically at batch boundaries.
Workers check control flags every batch, so a controller tick observes a
consistent prefix of the schedule at all times.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import kernels, store
from .query import AggregateQuery, Number, eval_expr, eval_pred, x_values
from .store import ChunkIndex, RawChunk, Schema


@dataclass
class PipelineConfig:
    threads: int = 4
    buffer_capacity: int = 4
    per_tuple_cost: float = 0.0  # seconds of injected CPU cost per tuple
    per_chunk_delay: tuple[float, float] = (0.0, 0.0)  # seconds, uniform
    seed: int = 0
    batch_tuples: int = 64
    retain_values: bool = False  # keep extracted column values for the synopsis

    def __post_init__(self):
        if self.threads < 1:
            raise ValueError("need at least one worker")
        if self.buffer_capacity < 1:
            raise ValueError("need buffer capacity of at least one chunk")
        if self.batch_tuples < 1:
            raise ValueError("batch must cover at least one tuple")


@dataclass(frozen=True)
class ResourceSnapshot:
    buffered_chunks: int
    idle_workers: int
    timestamp_ms: float

    @property
    def regime(self) -> str:
        return "IO_BOUND" if self.idle_workers >= self.buffered_chunks else "CPU_BOUND"


def in_chunk_permutation(seed, n_records: int) -> np.ndarray:
    """Uniform random extraction order over a chunk's records; any prefix
    is a simple random sample without replacement."""
    if n_records < 1:
        raise ValueError("chunk must hold at least one record")
    return np.random.default_rng(seed).permutation(n_records)


def _int_safe_expr(node) -> bool:
    from .query import BinOp, Between, BoolOp, Column, Comparison, Neg

    if isinstance(node, Number):
        return float(node.value).is_integer()
    if isinstance(node, Column):
        return True
    if isinstance(node, Neg):
        return _int_safe_expr(node.operand)
    if isinstance(node, BinOp):
        return _int_safe_expr(node.left) and _int_safe_expr(node.right)
    if isinstance(node, Comparison):
        return _int_safe_expr(node.left) and _int_safe_expr(node.right)
    if isinstance(node, Between):
        return _int_safe_expr(node.lo) and _int_safe_expr(node.hi)
    if isinstance(node, BoolOp):
        return _int_safe_expr(node.left) and _int_safe_expr(node.right)
    return False


class TupleExtractor:
    """Parses the query's referenced columns from raw records and evaluates
    the per-tuple contribution x (0 when the predicate fails)."""

    def __init__(self, schema: Schema, query: AggregateQuery):
        self.schema = schema
        self.query = query
        names = list(query.columns) if query.columns else []
        self.col_idx = np.array(sorted(schema.column_index(c) for c in names), dtype=np.int64)
        self.col_names = [schema.names[i] for i in self.col_idx.tolist()]
        self.group_pos = self.col_names.index(query.group_column) if query.group_column else -1
        self.int_exact_capable = (
            schema.all_int
            and _int_safe_expr(query.expression)
            and (query.predicate is None or _int_safe_expr(query.predicate))
        )

    def _parse(self, chunk: RawChunk, rows: np.ndarray, as_int: bool):
        starts, ends = chunk.record_bounds()
        if chunk.fmt == "csv":
            fn = kernels.parse_rows_i64 if as_int else kernels.parse_rows_f64
            return fn(chunk.data, starts, ends, rows, self.col_idx, len(self.schema.names), chunk.delim)
        dtype = np.int64 if as_int else np.float64
        return store.decode_rows_binary(chunk, self.schema, rows, self.col_idx, dtype=dtype)

    def extract(self, chunk: RawChunk, rows: np.ndarray):
        """Returns (x[g], pass_mask[g], groups[g] or None, values[g, C], n_bad)
        over the good rows of the requested records, in request order."""
        if self.col_idx.size == 0:
            # Pure COUNT(*) with no predicate columns: nothing to parse.
            n = rows.size
            mask = eval_pred(self.query.predicate, {}, n)
            x = x_values(self.query, {}, n)
            return x, mask, None, np.empty((n, 0)), 0
        vals, status = self._parse(chunk, rows, as_int=False)
        good = status == 0
        n_bad = int(rows.size - good.sum())
        if n_bad:
            vals = vals[good]
        cols = {name: vals[:, i] for i, name in enumerate(self.col_names)}
        n = vals.shape[0]
        mask = eval_pred(self.query.predicate, cols, n)
        if np.isscalar(mask) or getattr(mask, "ndim", 0) == 0:
            mask = np.full(n, bool(mask))
        e = eval_expr(self.query.expression, cols)
        if np.isscalar(e) or getattr(e, "ndim", 0) == 0:
            e = np.full(n, float(e))
        x = np.where(mask, e.astype(np.float64, copy=False), 0.0)
        groups = None
        if self.group_pos >= 0:
            groups = vals[:, self.group_pos].astype(np.int64)
        return x, mask, groups, vals, n_bad

    def extract_int(self, chunk: RawChunk, rows: np.ndarray):
        """Exact integer twin of extract() for the full-scan baseline.

        Returns (x int64 array, pass_mask, n_bad)."""
        if self.col_idx.size == 0:
            n = rows.size
            mask = eval_pred(self.query.predicate, {}, n)
            if np.isscalar(mask):
                mask = np.full(n, bool(mask))
            const = int(eval_expr(self.query.expression, {}))
            x = np.where(mask, np.int64(const), np.int64(0))
            return x, mask, 0
        vals, status = self._parse(chunk, rows, as_int=True)
        good = status == 0
        n_bad = int(rows.size - good.sum())
        if n_bad:
            vals = vals[good]
        cols = {name: vals[:, i] for i, name in enumerate(self.col_names)}
        n = vals.shape[0]
        mask = eval_pred(self.query.predicate, cols, n)
        if np.isscalar(mask) or getattr(mask, "ndim", 0) == 0:
            mask = np.full(n, bool(mask))
        e = eval_expr(self.query.expression, cols)
        if np.isscalar(e) or getattr(e, "ndim", 0) == 0:
            e = np.full(n, int(e), dtype=np.int64)
        x = np.where(mask, e, np.int64(0))
        return x, mask, n_bad


@dataclass
class GroupAccum:
    y1: float = 0.0
    y2: float = 0.0
    c1: float = 0.0


class ExtractTask:
    """Per-chunk extraction state owned by one worker at a time."""

    def __init__(self, chunk_id: int, sched_pos: int, chunk: RawChunk, tuple_seed, sequential: bool):
        self.chunk_id = chunk_id
        self.sched_pos = sched_pos
        self.chunk = chunk
        self.tuple_seed = tuple_seed
        self.sequential = sequential
        self.n_records = chunk.n_records
        self.cursor = 0
        self.m = 0  # good tuples extracted
        self.y1 = 0.0
        self.y2 = 0.0
        self.c1 = 0.0
        self.y1_int = 0  # exact accumulation (full-scan baseline)
        self.c1_int = 0
        self.rejects = 0
        self.groups: dict[int, GroupAccum] = {}
        self.retained: list[np.ndarray] = []
        self.started = False
        self.done = False
        self.finalize_requested = False
        self.finalized_by_rule = False
        self.start_ts: float = 0.0
        self.first_satisfied_ts: Optional[float] = None
        self.end_ts: Optional[float] = None
        # (m, y1, y2, c1, rejects, cursor, done, groups-copy) swapped atomically
        self.published: tuple = (0, 0.0, 0.0, 0.0, 0, 0, False, None)

    def publish(self) -> None:
        g = {k: (a.y1, a.y2, a.c1) for k, a in self.groups.items()} if self.groups else None
        self.published = (self.m, self.y1, self.y2, self.c1, self.rejects, self.cursor, self.done, g)


@dataclass(frozen=True)
class TaskView:
    """Consistent, immutable view of one task at snapshot time."""

    chunk_id: int
    sched_pos: int
    n_records: int
    m: int
    y1: float
    y2: float
    c1: float
    rejects: int
    cursor: int
    done: bool
    groups: Optional[dict]


class ChunkPipeline:
    """Reader + P extraction workers over a fixed chunk schedule."""

    def __init__(
        self,
        index: ChunkIndex,
        schema: Schema,
        extractor: TupleExtractor,
        schedule: np.ndarray,
        config: PipelineConfig,
        local_rule: Optional[Callable[[ExtractTask], bool]] = None,
        on_task_done: Optional[Callable[[ExtractTask], None]] = None,
        sequential_tuples: bool = False,
        exact_int: bool = False,
        clock: Callable[[], float] = time.perf_counter,
    ):
        self.index = index
        self.schema = schema
        self.extractor = extractor
        self.schedule = np.asarray(schedule)
        self.config = config
        self.local_rule = local_rule
        self.on_task_done = on_task_done
        self.sequential_tuples = sequential_tuples
        self.exact_int = exact_int and extractor.int_exact_capable
        self.clock = clock

        self.tasks: list[Optional[ExtractTask]] = [None] * self.schedule.size
        self._queue: queue.Queue = queue.Queue(maxsize=config.buffer_capacity)
        self._stop = threading.Event()
        self._busy = 0
        self._busy_lock = threading.Lock()
        self.chunks_read = 0
        self.bytes_read = 0
        self.error: Optional[str] = None
        self._threads: list[threading.Thread] = []
        self._delay_rng = np.random.default_rng((config.seed, 0xD31A))

    # ------------------------------------------------------------- control

    def start(self) -> None:
        t0 = self.clock()
        self._t0 = t0
        reader = threading.Thread(target=self._reader, name="reader", daemon=True)
        self._threads.append(reader)
        for w in range(self.config.threads):
            th = threading.Thread(target=self._worker, name=f"extract-{w}", daemon=True)
            self._threads.append(th)
        for th in self._threads:
            th.start()

    def request_stop(self) -> None:
        self._stop.set()

    @property
    def stopping(self) -> bool:
        return self._stop.is_set()

    def join(self) -> None:
        for th in self._threads:
            th.join()

    @property
    def all_done(self) -> bool:
        return all(t is not None and t.published[6] for t in self.tasks)

    # ----------------------------------------------------------- snapshots

    def now_ms(self) -> float:
        return (self.clock() - self._t0) * 1000.0

    def snapshot_in_order(self) -> list[TaskView]:
        """Tasks in schedule order, cut at the first not-yet-started slot, so
        the result is always a prefix of the schedule."""
        out = []
        for t in self.tasks:
            if t is None or not t.started:
                break
            m, y1, y2, c1, rej, cur, done, groups = t.published
            out.append(
                TaskView(t.chunk_id, t.sched_pos, t.n_records, m, y1, y2, c1, rej, cur, done, groups)
            )
        return out

    def snapshot_resources(self) -> ResourceSnapshot:
        with self._busy_lock:
            busy = self._busy
        return ResourceSnapshot(
            buffered_chunks=self._queue.qsize(),
            idle_workers=max(self.config.threads - busy, 0),
            timestamp_ms=self.now_ms(),
        )

    # ------------------------------------------------------------- threads

    def _reader(self) -> None:
        try:
            self._read_loop()
        except Exception as exc:
            self.error = f"{type(exc).__name__}: {exc}"
            self._stop.set()
        finally:
            for _ in range(self.config.threads):
                self._queue.put(None)

    def _read_loop(self) -> None:
        for pos in range(self.schedule.size):
            if self._stop.is_set():
                break
            j = int(self.schedule[pos])
            chunk = store.read_chunk(self.index, j)
            task = ExtractTask(
                chunk_id=j,
                sched_pos=pos,
                chunk=chunk,
                tuple_seed=(self.config.seed, j),
                sequential=self.sequential_tuples,
            )
            self.tasks[pos] = task
            self.chunks_read += 1
            self.bytes_read += int(self.index.lengths[j])
            while not self._stop.is_set():
                try:
                    self._queue.put(task, timeout=0.05)
                    break
                except queue.Full:
                    continue
            else:
                break

    def _chunk_delay(self) -> float:
        lo, hi = self.config.per_chunk_delay
        if hi <= 0.0:
            return 0.0
        return float(self._delay_rng.uniform(lo, hi))

    def _worker(self) -> None:
        while True:
            task = self._queue.get()
            if task is None:
                break
            with self._busy_lock:
                self._busy += 1
            try:
                self._run_task(task)
            except Exception as exc:
                self.error = f"{type(exc).__name__}: {exc}"
                task.done = True
                task.publish()
                self._stop.set()
            finally:
                with self._busy_lock:
                    self._busy -= 1

    def _run_task(self, task: ExtractTask) -> None:
        cfg = self.config
        task.start_ts = self.clock()
        task.started = True
        if self._stop.is_set():
            task.done = True
            task.end_ts = self.clock()
            task.publish()
            return
        delay = self._chunk_delay()
        if delay > 0.0:
            time.sleep(delay)
        if task.sequential:
            perm = np.arange(task.n_records, dtype=np.int64)
        else:
            perm = in_chunk_permutation(task.tuple_seed, task.n_records)
        grouped = self.extractor.group_pos >= 0
        while not self._stop.is_set() and not task.finalize_requested:
            k = min(cfg.batch_tuples, task.n_records - task.cursor)
            if k <= 0:
                break
            rows = perm[task.cursor : task.cursor + k]
            if self.exact_int:
                xi, mask, n_bad = self.extractor.extract_int(task.chunk, rows)
                task.y1_int += int(xi.sum())
                task.c1_int += int(np.count_nonzero(mask))
                x = xi.astype(np.float64)
                groups, vals = None, None
            else:
                x, mask, groups, vals, n_bad = self.extractor.extract(task.chunk, rows)
            if cfg.per_tuple_cost > 0.0:
                time.sleep(cfg.per_tuple_cost * k)
            task.cursor += k
            task.rejects += n_bad
            task.m += k - n_bad
            task.y1 += float(x.sum())
            task.y2 += float((x * x).sum())
            task.c1 += float(np.count_nonzero(mask))
            if grouped and groups is not None:
                for g in np.unique(groups).tolist():
                    sel = groups == g
                    acc = task.groups.setdefault(int(g), GroupAccum())
                    gx = x[sel]
                    acc.y1 += float(gx.sum())
                    acc.y2 += float((gx * gx).sum())
                    acc.c1 += float(np.count_nonzero(mask[sel]))
            if cfg.retain_values and vals is not None:
                task.retained.append(vals)
            task.publish()
            if self.local_rule is not None and self.local_rule(task):
                task.finalized_by_rule = True
                if task.first_satisfied_ts is None:
                    task.first_satisfied_ts = self.clock()
                break
        task.done = True
        task.end_ts = self.clock()
        task.publish()
        if self.on_task_done is not None:
            self.on_task_done(task)
