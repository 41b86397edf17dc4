export type RunStateName =
  | 'RUNNING'
  | 'SATISFIED'
  | 'STOPPED_BY_USER'
  | 'EXACT_COMPLETE'
  | 'FAILED';

export interface Snapshot {
  timestamp_ms: number;
  estimate: number;
  lo: number;
  hi: number;
  error_ratio: number;
  n_chunks: number;
  tuples: number;
  chunks_read: number;
  bytes_read: number;
  regime: string;
  group?: number;
  stale: boolean;
  unbounded: boolean;
}

const NUMERIC = new Set(['timestamp_ms', 'estimate', 'lo', 'hi', 'error_ratio']);
const INTEGER = new Set(['n_chunks', 'tuples', 'chunks_read', 'bytes_read', 'group']);

function parseNumber(v: string): number {
  if (v === 'inf') return Infinity;
  if (v === '-inf') return -Infinity;
  if (v === 'nan') return NaN;
  return Number(v);
}

/** One trace line (the SSE event payload) into a Snapshot. */
export function parseTraceLine(line: string): Snapshot {
  const out: Record<string, number | string> = {};
  for (const kv of line.trim().split(/\s+/)) {
    const eq = kv.indexOf('=');
    if (eq < 0) continue;
    const k = kv.slice(0, eq);
    const v = kv.slice(eq + 1);
    if (NUMERIC.has(k)) out[k] = parseNumber(v);
    else if (INTEGER.has(k)) out[k] = parseInt(v, 10);
    else out[k] = v;
  }
  const s = out as unknown as Snapshot;
  s.stale = out['stale'] === '1';
  s.unbounded = !isFinite(s.lo) || !isFinite(s.hi);
  return s;
}

export interface QueryRequest {
  file: string;
  sql: string;
  epsilon: number;
  delta_ms: number;
  strategy: string;
  threads: number;
}

export interface RunSummary {
  id: string;
  state: RunStateName;
  estimate: number | null;
  error_ratio: number | null;
  chunks_read: number;
  snapshots: number;
}
