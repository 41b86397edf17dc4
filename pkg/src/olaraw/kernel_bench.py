"""Benchmark the compiled extraction kernels against the fallback path.

Usage: python -m olaraw.kernel_bench [--mb 8] [--columns 16]

Parses the same synthetic text buffer through the numba kernels and the
python/numpy fallback and reports throughput for each. Run with
OLARAW_NUMBA=0 to confirm the engine works on the fallback alone.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from . import kernels
from .store import bounded_zipf


def build_buffer(mb: float, columns: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    rows = []
    size = 0
    target = int(mb * 2**20)
    block = 4096
    while size < target:
        data = np.column_stack(
            [bounded_zipf(rng, 0.25 * (k % 16), 999_999_999, block) for k in range(columns)]
        )
        for row in data.tolist():
            line = ",".join(map(str, row))
            rows.append(line)
            size += len(line) + 1
    buf = np.frombuffer(("\n".join(rows) + "\n").encode(), dtype=np.uint8)
    starts, ends = kernels.record_offsets_text(buf)
    return buf, starts, ends


def run_once(fn, buf, starts, ends, cols, ncols, repeats=3):
    rows = np.arange(starts.size, dtype=np.int64)
    out = np.zeros((rows.size, cols.size), dtype=np.float64)
    status = np.zeros(rows.size, dtype=np.uint8)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(buf, starts, ends, rows, cols, ncols, 0x2C, out, status)
        best = min(best, time.perf_counter() - t0)
    if status.any():
        raise RuntimeError("malformed rows in benchmark buffer")
    return best, out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--mb", type=float, default=8.0)
    ap.add_argument("--columns", type=int, default=16)
    args = ap.parse_args(argv)

    buf, starts, ends = build_buffer(args.mb, args.columns)
    cols = np.arange(args.columns, dtype=np.int64)
    mb = buf.size / 2**20
    print(f"buffer: {mb:.1f} MB, {starts.size} records, {args.columns} columns")

    t_py, out_py = run_once(kernels._parse_rows_f64_py, buf, starts, ends, cols, args.columns)
    print(f"numpy/python fallback: {mb / t_py:8.1f} MB/s  ({t_py * 1e3:.1f} ms)")

    if kernels.NUMBA_ENABLED:
        kernels.warmup()
        t_nb, out_nb = run_once(kernels._parse_rows_f64_nb, buf, starts, ends, cols, args.columns)
        print(f"numba kernels:         {mb / t_nb:8.1f} MB/s  ({t_nb * 1e3:.1f} ms)")
        print(f"speedup: {t_py / t_nb:.1f}x")
        if not np.allclose(out_py, out_nb):
            raise RuntimeError("paths disagree")
        print("paths agree (allclose)")
    else:
        print("numba disabled (OLARAW_NUMBA=0 or not installed); fallback only")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
