"""Hot extraction kernels: numba-compiled with a pure-numpy fallback.

Tuple extraction (locating records, parsing delimited fields) is the hot
inner loop of every query. The numba path compiles the per-record parsers
to native code; the fallback decodes through numpy/python and is kept
semantically identical so either path can back the engine.

Path selection: OLARAW_NUMBA=0 in the environment forces the fallback,
OLARAW_NUMBA=1 requires numba (import error otherwise). Default is numba
when importable. `python -m olaraw.kernel_bench` compares the two paths.

Caveat: the compiled float parser rounds through decimal-digit
accumulation and may differ from python's strtod by 1 ulp on long
mantissas. Integer parsing is exact on both paths.
"""

from __future__ import annotations

import os

import numpy as np

_env = os.environ.get("OLARAW_NUMBA", "").strip()
if _env == "0":
    NUMBA_ENABLED = False
elif _env == "1":
    import numba  # noqa: F401

    NUMBA_ENABLED = True
else:
    try:
        import numba  # noqa: F401

        NUMBA_ENABLED = True
    except ImportError:
        NUMBA_ENABLED = False


def record_offsets_text(buf: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start/end byte offsets of newline-terminated records in `buf`.

    The chunk must end with a newline (enforced at index build time).
    """
    nl = np.flatnonzero(buf == 0x0A)
    starts = np.empty(nl.size, dtype=np.int64)
    starts[0] = 0
    starts[1:] = nl[:-1] + 1
    return starts, nl.astype(np.int64)


def _parse_rows_f64_py(buf, starts, ends, rows, cols, ncols, delim, out, status):
    data = buf.tobytes()
    d = chr(delim)
    want = cols.tolist()
    for r in range(rows.size):
        i = rows[r]
        fields = data[starts[i] : ends[i]].decode("ascii", "replace").split(d)
        if len(fields) != ncols:
            status[r] = 1
            continue
        try:
            for c, col in enumerate(want):
                out[r, c] = float(fields[col])
        except ValueError:
            status[r] = 1


def _parse_rows_i64_py(buf, starts, ends, rows, cols, ncols, delim, out, status):
    data = buf.tobytes()
    d = chr(delim)
    want = cols.tolist()
    for r in range(rows.size):
        i = rows[r]
        fields = data[starts[i] : ends[i]].decode("ascii", "replace").split(d)
        if len(fields) != ncols:
            status[r] = 1
            continue
        try:
            for c, col in enumerate(want):
                out[r, c] = int(fields[col])
        except ValueError:
            status[r] = 1


if NUMBA_ENABLED:
    from numba import njit

    @njit(cache=True, nogil=True)
    def _atof(buf, s, e):
        # [-+]?digits[.digits][eE[-+]digits]; returns (value, ok)
        p = s
        sign = 1.0
        if p < e and (buf[p] == 0x2D or buf[p] == 0x2B):
            if buf[p] == 0x2D:
                sign = -1.0
            p += 1
        mant = 0.0
        ndig = 0
        while p < e and 0x30 <= buf[p] <= 0x39:
            mant = mant * 10.0 + (buf[p] - 0x30)
            ndig += 1
            p += 1
        exp10 = 0
        if p < e and buf[p] == 0x2E:
            p += 1
            while p < e and 0x30 <= buf[p] <= 0x39:
                mant = mant * 10.0 + (buf[p] - 0x30)
                exp10 -= 1
                ndig += 1
                p += 1
        if ndig == 0:
            return 0.0, False
        if p < e and (buf[p] == 0x65 or buf[p] == 0x45):
            p += 1
            esign = 1
            if p < e and (buf[p] == 0x2D or buf[p] == 0x2B):
                if buf[p] == 0x2D:
                    esign = -1
                p += 1
            ev = 0
            got = False
            while p < e and 0x30 <= buf[p] <= 0x39:
                ev = ev * 10 + (buf[p] - 0x30)
                got = True
                p += 1
            if not got:
                return 0.0, False
            exp10 += esign * ev
        if p != e:
            return 0.0, False
        return sign * mant * 10.0**exp10, True

    @njit(cache=True, nogil=True)
    def _atoi(buf, s, e):
        p = s
        sign = 1
        if p < e and (buf[p] == 0x2D or buf[p] == 0x2B):
            if buf[p] == 0x2D:
                sign = -1
            p += 1
        v = 0
        got = False
        while p < e and 0x30 <= buf[p] <= 0x39:
            v = v * 10 + (buf[p] - 0x30)
            got = True
            p += 1
        if not got or p != e:
            return 0, False
        return sign * v, True

    @njit(cache=True, nogil=True)
    def _parse_rows_f64_nb(buf, starts, ends, rows, cols, ncols, delim, out, status):
        for r in range(rows.size):
            i = rows[r]
            fs = starts[i]
            col = 0
            ci = 0
            ok = True
            for p in range(starts[i], ends[i] + 1):
                if p == ends[i] or buf[p] == delim:
                    if ci < cols.size and col == cols[ci]:
                        v, good = _atof(buf, fs, p)
                        out[r, ci] = v
                        if not good:
                            ok = False
                        ci += 1
                    col += 1
                    fs = p + 1
            if not ok or col != ncols or ci != cols.size:
                status[r] = 1

    @njit(cache=True, nogil=True)
    def _parse_rows_i64_nb(buf, starts, ends, rows, cols, ncols, delim, out, status):
        for r in range(rows.size):
            i = rows[r]
            fs = starts[i]
            col = 0
            ci = 0
            ok = True
            for p in range(starts[i], ends[i] + 1):
                if p == ends[i] or buf[p] == delim:
                    if ci < cols.size and col == cols[ci]:
                        v, good = _atoi(buf, fs, p)
                        out[r, ci] = v
                        if not good:
                            ok = False
                        ci += 1
                    col += 1
                    fs = p + 1
            if not ok or col != ncols or ci != cols.size:
                status[r] = 1


def parse_rows_f64(buf, starts, ends, rows, cols, ncols, delim=0x2C):
    """Parse `cols` (sorted column indices) of the given record rows to float64.

    Returns (values[len(rows), len(cols)], status[len(rows)]) where a nonzero
    status marks a malformed record (wrong arity or unparsable field).
    """
    out = np.zeros((rows.size, cols.size), dtype=np.float64)
    status = np.zeros(rows.size, dtype=np.uint8)
    if NUMBA_ENABLED:
        _parse_rows_f64_nb(buf, starts, ends, rows, cols, ncols, delim, out, status)
    else:
        _parse_rows_f64_py(buf, starts, ends, rows, cols, ncols, delim, out, status)
    return out, status


def parse_rows_i64(buf, starts, ends, rows, cols, ncols, delim=0x2C):
    """Integer twin of parse_rows_f64 (exact, for the full-scan baseline)."""
    out = np.zeros((rows.size, cols.size), dtype=np.int64)
    status = np.zeros(rows.size, dtype=np.uint8)
    if NUMBA_ENABLED:
        _parse_rows_i64_nb(buf, starts, ends, rows, cols, ncols, delim, out, status)
    else:
        _parse_rows_i64_py(buf, starts, ends, rows, cols, ncols, delim, out, status)
    return out, status


def warmup() -> None:
    """Trigger jit compilation so timed runs do not pay it."""
    buf = np.frombuffer(b"1,2.5,-3\n", dtype=np.uint8)
    starts = np.array([0], dtype=np.int64)
    ends = np.array([8], dtype=np.int64)
    rows = np.array([0], dtype=np.int64)
    cols = np.array([0, 1, 2], dtype=np.int64)
    parse_rows_f64(buf, starts, ends, rows, cols, 3)
    parse_rows_i64(buf, starts, ends, rows, np.array([0, 2], dtype=np.int64), 3)
