"""Memory-budgeted bi-level sample synopsis, reused across queries.

Each cached chunk keeps a contiguous window of its fixed extraction
permutation (hence a simple random sample of its size), a cursor for
circular resampling, and the within-chunk variance observed by the last
query that touched it. The tuple budget is divided across chunks
proportionally to those variances; shrinking always discards the oldest
end (front) of a window, so the newest samples survive.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .estimator import ChunkStats
from .query import AggregateQuery, eval_expr, eval_pred

log = logging.getLogger(__name__)

M_FLOOR = 2  # below two tuples a stratum cannot carry a variance estimate


class Answerability(enum.Enum):
    FULL = "full"
    PARTIAL = "partial"
    REBUILD = "rebuild"


@dataclass
class AccessPlan:
    memory: list[int]  # in-memory chunks, processing order
    missing: list[int]  # chunks to read from raw, in order
    deferred: list[int]  # in-memory chunks needing more samples, appended last


@dataclass
class SynopsisChunk:
    chunk_id: int
    tuple_seed: tuple[int, int]
    n_records: int  # permutation length M_j
    start: int  # ring index of the window start within the permutation
    values: np.ndarray  # (window length, n columns), window order
    variance: float  # within-chunk variance from the last touching query

    @property
    def length(self) -> int:
        return int(self.values.shape[0])

    @property
    def cursor(self) -> int:
        return (self.start + self.length) % self.n_records

    @property
    def exhausted(self) -> bool:
        return self.length == self.n_records

    def drop_front(self, k: int) -> None:
        if k <= 0:
            return
        if k >= self.length:
            raise ValueError("cannot drop the whole window")
        self.start = (self.start + k) % self.n_records
        self.values = self.values[k:]


class SynopsisError(ValueError):
    pass


class Synopsis:
    """Per-process sample cache for one raw file."""

    def __init__(
        self,
        budget_tuples: int,
        columns: Sequence[str],
        file_path: str,
        origin_schedule: Sequence[int],
        origin_query_id: str = "",
    ):
        if budget_tuples < 0:
            raise SynopsisError("budget must be nonnegative")
        self.budget = int(budget_tuples)
        self.columns = tuple(columns)
        self.file_path = file_path
        self.origin_schedule = tuple(int(j) for j in origin_schedule)
        self.origin_query_id = origin_query_id
        self.chunks: dict[int, SynopsisChunk] = {}
        self.insertion_order: list[int] = []

    @classmethod
    def from_bytes(cls, budget_bytes: int, row_width: int, **kw) -> "Synopsis":
        return cls(budget_tuples=max(budget_bytes // max(row_width, 1), 0), **kw)

    # -------------------------------------------------------------- queries

    @property
    def total_retained(self) -> int:
        return sum(c.length for c in self.chunks.values())

    @property
    def free_budget(self) -> int:
        return self.budget - self.total_retained

    def can_answer(self, query: AggregateQuery, n_chunks_total: int, file_path: str) -> Answerability:
        if file_path != self.file_path or not self.chunks:
            return Answerability.REBUILD
        if any(c not in self.columns for c in query.columns):
            return Answerability.REBUILD
        if len(self.chunks) == n_chunks_total:
            return Answerability.FULL
        return Answerability.PARTIAL

    def plan_access_order(
        self,
        mode: Answerability,
        n_chunks_total: int,
        unsatisfied: Sequence[int] = (),
    ) -> AccessPlan:
        """FULL: refetches ordered by descending stored variance. PARTIAL:
        original schedule order with unsatisfied in-memory chunks appended
        after the missing reads."""
        unsat = {int(j) for j in unsatisfied}
        if mode == Answerability.FULL:
            memory = [j for j in self.origin_schedule if j in self.chunks]
            refetch = sorted(unsat, key=lambda j: (-self.chunks[j].variance, j))
            return AccessPlan(memory=memory, missing=[], deferred=refetch)
        memory = [j for j in self.origin_schedule if j in self.chunks and j not in unsat]
        missing = [j for j in self.origin_schedule if j not in self.chunks]
        deferred = [j for j in self.origin_schedule if j in self.chunks and j in unsat]
        return AccessPlan(memory=memory, missing=missing, deferred=deferred)

    def chunk_stats(self, query: AggregateQuery, chunk_id: int) -> ChunkStats:
        sc = self.chunks[chunk_id]
        n = sc.length
        cols = {name: sc.values[:, i] for i, name in enumerate(self.columns)}
        mask = eval_pred(query.predicate, cols, n)
        if np.isscalar(mask) or getattr(mask, "ndim", 0) == 0:
            mask = np.full(n, bool(mask))
        e = eval_expr(query.expression, cols)
        if np.isscalar(e) or getattr(e, "ndim", 0) == 0:
            e = np.full(n, float(e))
        x = np.where(mask, e.astype(np.float64, copy=False), 0.0)
        return ChunkStats(
            chunk_id=chunk_id,
            big_m=sc.n_records,
            m=n,
            y1=float(x.sum()),
            y2=float((x * x).sum()),
            c1=float(np.count_nonzero(mask)),
        )

    # ---------------------------------------------------------- allocation

    def _proportional(self, variances: dict[int, float], budget: int) -> dict[int, int]:
        """Largest-remainder proportional split with an m_floor per chunk;
        rounding ties broken by ascending chunk id."""
        ids = sorted(variances)
        total_v = sum(variances.values())
        if total_v <= 0.0:
            shares = {j: budget / len(ids) for j in ids}
        else:
            shares = {j: budget * variances[j] / total_v for j in ids}
        alloc = {j: int(math.floor(shares[j])) for j in ids}
        rest = budget - sum(alloc.values())
        order = sorted(ids, key=lambda j: (-(shares[j] - alloc[j]), j))
        for j in order[:rest]:
            alloc[j] += 1
        # Enforce the floor, taking the excess from the largest allocations.
        deficit = 0
        for j in ids:
            if alloc[j] < M_FLOOR:
                deficit += M_FLOOR - alloc[j]
                alloc[j] = M_FLOOR
        while deficit > 0:
            donor = max((j for j in ids if alloc[j] > M_FLOOR), key=lambda j: (alloc[j], -j))
            alloc[donor] -= 1
            deficit -= 1
        return alloc

    def _rebalance(self, variances: dict[int, float]) -> dict[int, int]:
        """Choose allocations for the given chunk set, evicting the
        lowest-variance chunks while the budget cannot float them all."""
        variances = dict(variances)
        while variances and self.budget < M_FLOOR * len(variances):
            victim = min(variances, key=lambda j: (variances[j], j))
            log.warning("synopsis budget %d too small for %d chunks; evicting chunk %d",
                        self.budget, len(variances), victim)
            variances.pop(victim)
            if victim in self.chunks:
                del self.chunks[victim]
                self.insertion_order.remove(victim)
        if not variances:
            return {}
        return self._proportional(variances, self.budget)

    def _apply_allocations(self, alloc: dict[int, int]) -> None:
        for j, quota in alloc.items():
            sc = self.chunks.get(j)
            if sc is not None and sc.length > quota:
                sc.drop_front(sc.length - quota)

    # ---------------------------------------------------------- maintenance

    def insert_chunk(
        self,
        chunk_id: int,
        values: np.ndarray,
        tuple_seed: tuple[int, int],
        n_records: int,
        local_variance: float,
    ) -> None:
        """Insert a chunk's extracted permutation prefix (values row i is
        permutation position i). Over budget, allocations are recomputed and
        every window keeps its newest end."""
        chunk_id = int(chunk_id)
        if chunk_id in self.chunks:
            raise SynopsisError(f"chunk {chunk_id} already present")
        if values.ndim != 2 or values.shape[1] != len(self.columns):
            raise SynopsisError("values arity does not match synopsis columns")
        if values.shape[0] < 1:
            raise SynopsisError("cannot insert an empty sample")
        v = float(local_variance) if math.isfinite(local_variance) else 0.0
        if values.shape[0] <= self.free_budget:
            self.chunks[chunk_id] = SynopsisChunk(chunk_id, tuple_seed, n_records, 0, np.array(values), v)
            self.insertion_order.append(chunk_id)
            return
        variances = {j: self.chunks[j].variance for j in self.chunks}
        variances[chunk_id] = v
        alloc = self._rebalance(variances)
        if chunk_id not in alloc:
            return  # evicted before ever landing
        quota = min(alloc.pop(chunk_id), values.shape[0])
        self._apply_allocations(alloc)
        kept = np.array(values[values.shape[0] - quota :])
        self.chunks[chunk_id] = SynopsisChunk(
            chunk_id, tuple_seed, n_records, values.shape[0] - quota, kept, v
        )
        self.insertion_order.append(chunk_id)

    def resample_chunk(
        self,
        chunk_id: int,
        needed: int,
        fetch: Callable[[SynopsisChunk, np.ndarray], np.ndarray],
        new_variance: Optional[float] = None,
        rebalance: bool = True,
    ) -> int:
        """Extend a chunk's window by up to `needed` tuples, continuing the
        circular scan at the cursor; never revisits positions already inside
        the window (the window caps at the full chunk). Returns the number
        of tuples actually added.

        With rebalance=False the window may temporarily exceed the budget
        (a running query estimates over its full working sample); call
        enforce_budget() when the query finishes.
        """
        if needed < 0:
            raise SynopsisError("needed must be nonnegative")
        sc = self.chunks[int(chunk_id)]
        k = min(needed, sc.n_records - sc.length)
        if k > 0:
            ring = (sc.cursor + np.arange(k)) % sc.n_records
            new_vals = fetch(sc, ring)
            if new_vals.shape != (k, len(self.columns)):
                raise SynopsisError("fetch returned wrong shape")
            sc.values = np.concatenate([sc.values, new_vals], axis=0)
        if new_variance is not None and math.isfinite(new_variance):
            sc.variance = float(new_variance)
        if rebalance:
            self.enforce_budget()
        return k

    def enforce_budget(self) -> None:
        """Recompute proportional allocations and prune window fronts until
        the retained total fits the budget again."""
        if self.total_retained <= self.budget:
            return
        alloc = self._rebalance({j: self.chunks[j].variance for j in self.chunks})
        self._apply_allocations(alloc)

    # ------------------------------------------------------------ export

    def summary(self) -> dict:
        return {
            "budget_tuples": self.budget,
            "retained_tuples": self.total_retained,
            "chunks_present": len(self.chunks),
            "columns": list(self.columns),
            "file": self.file_path,
            "origin_query": self.origin_query_id,
        }

    def export(self, path: str | Path) -> None:
        lines = [
            f"budget={self.budget} file={self.file_path} origin={self.origin_query_id or '-'} "
            f"columns={','.join(self.columns)} schedule={','.join(map(str, self.origin_schedule))}"
        ]
        for j in self.insertion_order:
            sc = self.chunks[j]
            lines.append(
                f"chunk={sc.chunk_id} seed={sc.tuple_seed[0]}:{sc.tuple_seed[1]} "
                f"records={sc.n_records} start={sc.start} len={sc.length} "
                f"cursor={sc.cursor} variance={sc.variance!r}"
            )
            for row in sc.values.tolist():
                lines.append(",".join(repr(v) for v in row))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Synopsis":
        lines = Path(path).read_text().splitlines()
        head = dict(kv.split("=", 1) for kv in lines[0].split())
        syn = cls(
            budget_tuples=int(head["budget"]),
            columns=head["columns"].split(","),
            file_path=head["file"],
            origin_schedule=[int(x) for x in head["schedule"].split(",") if x],
            origin_query_id="" if head["origin"] == "-" else head["origin"],
        )
        i = 1
        while i < len(lines):
            meta = dict(kv.split("=", 1) for kv in lines[i].split())
            n = int(meta["len"])
            rows = [[float(v) for v in ln.split(",")] for ln in lines[i + 1 : i + 1 + n]]
            s0, s1 = meta["seed"].split(":")
            sc = SynopsisChunk(
                chunk_id=int(meta["chunk"]),
                tuple_seed=(int(s0), int(s1)),
                n_records=int(meta["records"]),
                start=int(meta["start"]),
                values=np.array(rows, dtype=np.float64).reshape(n, len(syn.columns)),
                variance=float(meta["variance"]),
            )
            syn.chunks[sc.chunk_id] = sc
            syn.insertion_order.append(sc.chunk_id)
            i += 1 + n
        return syn
