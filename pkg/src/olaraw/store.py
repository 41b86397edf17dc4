"""Chunked access to raw files: index construction, chunk reads, synthesis.

Two physical formats are supported: newline-terminated delimited text
(no quoting) and fixed-width little-endian binary records. A sidecar
index (`<file>.idx`) persists byte ranges and exact tuple counts per
chunk; a schema file (`<file>.schema`) lists one `name:type[:width]`
line per column.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels


class RawStoreError(ValueError):
    pass


@dataclass(frozen=True)
class Schema:
    names: tuple[str, ...]
    types: tuple[str, ...]  # 'int64' | 'float64'
    widths: Optional[tuple[int, ...]] = None  # fixed-width binary only

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise RawStoreError("duplicate column names in schema")
        for t in self.types:
            if t not in ("int64", "float64"):
                raise RawStoreError(f"unsupported column type {t!r}")
        if self.widths is not None:
            for w in self.widths:
                if w not in (1, 2, 4, 8):
                    raise RawStoreError(f"unsupported column width {w}")

    @property
    def is_binary(self) -> bool:
        return self.widths is not None

    @property
    def record_width(self) -> int:
        if self.widths is None:
            raise RawStoreError("record_width undefined for delimited text")
        return int(sum(self.widths))

    @property
    def all_int(self) -> bool:
        return all(t == "int64" for t in self.types)

    def column_index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise RawStoreError(f"unknown column {name!r}") from None

    def save(self, path: str | Path) -> None:
        lines = []
        for i, (n, t) in enumerate(zip(self.names, self.types)):
            if self.widths is not None:
                lines.append(f"{n}:{t}:{self.widths[i]}")
            else:
                lines.append(f"{n}:{t}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Schema":
        names, types, widths = [], [], []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            parts = line.split(":")
            if len(parts) not in (2, 3):
                raise RawStoreError(f"bad schema line {line!r}")
            names.append(parts[0])
            types.append(parts[1])
            if len(parts) == 3:
                widths.append(int(parts[2]))
        if widths and len(widths) != len(names):
            raise RawStoreError("widths must be given for all columns or none")
        return cls(tuple(names), tuple(types), tuple(widths) if widths else None)


@dataclass
class ChunkIndex:
    path: str
    size: int
    fmt: str  # 'csv' | 'bin'
    delim: int  # delimiter byte (csv only)
    record_width: int  # bin only, 0 for csv
    offsets: np.ndarray  # int64[N]
    lengths: np.ndarray  # int64[N]
    counts: np.ndarray  # int64[N]

    @property
    def n_chunks(self) -> int:
        return int(self.offsets.size)

    @property
    def total_tuples(self) -> int:
        return int(self.counts.sum())

    def validate(self) -> None:
        if self.n_chunks < 1:
            raise RawStoreError("index has no chunks")
        if int(self.offsets[0]) != 0:
            raise RawStoreError("first chunk does not start at offset 0")
        ends = self.offsets + self.lengths
        if not np.array_equal(self.offsets[1:], ends[:-1]):
            raise RawStoreError("chunks are not disjoint and covering")
        if int(ends[-1]) != self.size:
            raise RawStoreError("chunks do not cover the file")
        if (self.counts < 1).any():
            raise RawStoreError("chunk with no records")

    def save(self, path: Optional[str | Path] = None) -> Path:
        p = Path(path) if path is not None else Path(self.path + ".idx")
        buf = io.StringIO()
        buf.write(
            f"size={self.size} chunks={self.n_chunks} tuples={self.total_tuples} "
            f"format={self.fmt} delim={self.delim} width={self.record_width}\n"
        )
        for o, l, c in zip(self.offsets, self.lengths, self.counts):
            buf.write(f"{o} {l} {c}\n")
        p.write_text(buf.getvalue())
        return p

    @classmethod
    def load(cls, path: str | Path, data_path: Optional[str] = None) -> "ChunkIndex":
        lines = Path(path).read_text().splitlines()
        head = dict(kv.split("=", 1) for kv in lines[0].split())
        rows = [tuple(int(v) for v in ln.split()) for ln in lines[1:] if ln.strip()]
        arr = np.array(rows, dtype=np.int64).reshape(len(rows), 3)
        idx = cls(
            path=data_path or str(Path(path)).removesuffix(".idx"),
            size=int(head["size"]),
            fmt=head["format"],
            delim=int(head["delim"]),
            record_width=int(head["width"]),
            offsets=arr[:, 0].copy(),
            lengths=arr[:, 1].copy(),
            counts=arr[:, 2].copy(),
        )
        idx.validate()
        return idx


@dataclass
class RawChunk:
    """One chunk's raw bytes plus lazily discovered record boundaries."""

    chunk_id: int
    data: np.ndarray  # uint8
    fmt: str
    delim: int
    record_width: int
    expected_count: int
    _starts: Optional[np.ndarray] = field(default=None, repr=False)
    _ends: Optional[np.ndarray] = field(default=None, repr=False)

    def record_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self._starts is None:
            if self.fmt == "csv":
                starts, ends = kernels.record_offsets_text(self.data)
            else:
                w = self.record_width
                starts = np.arange(0, self.data.size, w, dtype=np.int64)
                ends = starts + w
            if starts.size != self.expected_count:
                raise RawStoreError(
                    f"chunk {self.chunk_id}: found {starts.size} records, index says {self.expected_count}"
                )
            self._starts, self._ends = starts, ends
        return self._starts, self._ends

    @property
    def n_records(self) -> int:
        return self.expected_count


def build_chunk_index(
    path: str | Path,
    schema: Schema,
    target_chunk_bytes: int,
    delimiter: str = ",",
) -> ChunkIndex:
    """Split a raw file into record-aligned chunks of roughly the byte target.

    Text boundaries snap forward to the next newline; binary boundaries
    round to whole records. The sidecar `<file>.idx` is written alongside.
    """
    path = str(path)
    size = os.path.getsize(path)
    if size == 0:
        raise RawStoreError(f"{path}: empty file")
    if target_chunk_bytes < 1:
        raise RawStoreError("target_chunk_bytes must be positive")

    if schema.is_binary:
        w = schema.record_width
        if size % w != 0:
            raise RawStoreError(f"{path}: size {size} not a multiple of record width {w}")
        per = max(1, target_chunk_bytes // w) * w
        offsets = np.arange(0, size, per, dtype=np.int64)
        ends = np.minimum(offsets + per, size)
        lengths = ends - offsets
        counts = lengths // w
        idx = ChunkIndex(path, size, "bin", 0, w, offsets, lengths, counts)
    else:
        with open(path, "rb") as f:
            buf = np.frombuffer(f.read(), dtype=np.uint8)
        if buf[-1] != 0x0A:
            raise RawStoreError(f"{path}: malformed trailing record (missing final newline)")
        nl = np.flatnonzero(buf == 0x0A).astype(np.int64)
        offsets_list = [0]
        while offsets_list[-1] + target_chunk_bytes < size:
            want = offsets_list[-1] + target_chunk_bytes - 1
            k = int(np.searchsorted(nl, want, side="left"))
            if k >= nl.size - 1:
                break
            offsets_list.append(int(nl[k]) + 1)
        offsets = np.array(offsets_list, dtype=np.int64)
        ends = np.append(offsets[1:], size).astype(np.int64)
        lengths = ends - offsets
        counts = np.empty(offsets.size, dtype=np.int64)
        for j in range(offsets.size):
            lo = int(np.searchsorted(nl, offsets[j], side="left"))
            hi = int(np.searchsorted(nl, ends[j] - 1, side="right"))
            counts[j] = hi - lo
        idx = ChunkIndex(path, size, "csv", ord(delimiter), 0, offsets, lengths, counts)
    idx.validate()
    idx.save()
    return idx


def read_chunk(index: ChunkIndex, j: int) -> RawChunk:
    """Read chunk j's exact byte range from the raw file."""
    if not (0 <= j < index.n_chunks):
        raise RawStoreError(f"chunk id {j} out of range [0, {index.n_chunks})")
    with open(index.path, "rb") as f:
        f.seek(int(index.offsets[j]))
        data = f.read(int(index.lengths[j]))
    if len(data) != int(index.lengths[j]):
        raise RawStoreError(f"chunk {j}: short read")
    return RawChunk(
        chunk_id=j,
        data=np.frombuffer(data, dtype=np.uint8),
        fmt=index.fmt,
        delim=index.delim,
        record_width=index.record_width,
        expected_count=int(index.counts[j]),
    )


def chunk_permutation(seed: int, n: int) -> np.ndarray:
    """Uniform random read order over chunk ids, fixed before execution."""
    if n < 1:
        raise RawStoreError("need at least one chunk")
    return np.random.default_rng(seed).permutation(n)


def bounded_zipf(rng: np.random.Generator, s: float, bound: int, size: int) -> np.ndarray:
    """Zipf-like integers on [1, bound]: P(v) ~ integral of x^-s over [v, v+1).

    s=0 degenerates to uniform draws on [1, bound]. Sampled by inverting the
    continuous power-law CDF and flooring, which is exact for s=0 and a tight
    approximation of the discrete zipf elsewhere.
    """
    if s < 0:
        raise RawStoreError("zipf parameter must be nonnegative")
    u = rng.random(size)
    v = float(bound) + 1.0
    if abs(s - 1.0) < 1e-12:
        x = np.exp(u * np.log(v))
    else:
        t = 1.0 - s
        x = (1.0 + u * (v**t - 1.0)) ** (1.0 / t)
    out = np.floor(x).astype(np.int64)
    return np.clip(out, 1, bound)


def generate_synthetic(
    path: str | Path,
    tuples: int,
    columns: int = 16,
    zipf_lo: float = 0.0,
    zipf_hi: float = 4.0,
    value_bound: int = 999_999_999,
    seed: int = 0,
    fmt: str = "csv",
    delimiter: str = ",",
) -> Schema:
    """Write a synthetic dataset whose column k is zipf-skewed with
    parameter zipf_lo + k*(zipf_hi-zipf_lo)/columns; deterministic per seed.

    Writes `<path>` and `<path>.schema`; returns the Schema.
    """
    if tuples < 1 or columns < 1:
        raise RawStoreError("need at least one tuple and one column")
    rng = np.random.default_rng(seed)
    data = np.empty((tuples, columns), dtype=np.int64)
    for k in range(columns):
        s = zipf_lo + k * (zipf_hi - zipf_lo) / columns
        data[:, k] = bounded_zipf(rng, s, value_bound, tuples)

    names = tuple(f"a{k + 1}" for k in range(columns))
    if fmt == "csv":
        schema = Schema(names, ("int64",) * columns)
        with open(path, "wb") as f:
            out = io.StringIO()
            for row in data.tolist():
                out.write(delimiter.join(map(str, row)))
                out.write("\n")
            f.write(out.getvalue().encode("ascii"))
    elif fmt == "bin":
        schema = Schema(names, ("int64",) * columns, (8,) * columns)
        with open(path, "wb") as f:
            f.write(data.astype("<i8").tobytes(order="C"))
    else:
        raise RawStoreError(f"unknown format {fmt!r}")
    schema.save(str(path) + ".schema")
    return schema


def decode_rows_binary(
    chunk: RawChunk, schema: Schema, rows: np.ndarray, cols: np.ndarray, dtype=np.float64
) -> tuple[np.ndarray, np.ndarray]:
    """Decode selected rows/columns of a fixed-width binary chunk.

    Mirrors kernels.parse_rows_* for text; binary extraction has no parse
    cost, only the view/copy below.
    """
    w = schema.record_width
    mat = chunk.data.reshape(-1, w)
    col_off = np.cumsum([0] + list(schema.widths))  # type: ignore[arg-type]
    out = np.empty((rows.size, cols.size), dtype=dtype)
    sub = mat[rows]
    for i, c in enumerate(cols.tolist()):
        cw = schema.widths[c]  # type: ignore[index]
        raw = np.ascontiguousarray(sub[:, col_off[c] : col_off[c] + cw])
        if schema.types[c] == "int64":
            nd = {1: "<i1", 2: "<i2", 4: "<i4", 8: "<i8"}[cw]
        else:
            nd = {4: "<f4", 8: "<f8"}[cw]
        out[:, i] = raw.view(nd).ravel().astype(dtype, copy=False)
    status = np.zeros(rows.size, dtype=np.uint8)
    return out, status
