import { Snapshot } from './types.js';

/** Pure geometry for the convergence chart: an estimate line with its
 * confidence band on a linear axis, and the error ratio on a log-scale
 * companion axis. Unbounded-interval snapshots get band-absent markers. */

export interface ChartLayout {
  width: number;
  height: number;
  padLeft: number;
  padRight: number;
  padTop: number;
  padBottom: number;
}

export const DEFAULT_LAYOUT: ChartLayout = {
  width: 720,
  height: 300,
  padLeft: 70,
  padRight: 70,
  padTop: 12,
  padBottom: 28,
};

export interface ChartGeometry {
  estimatePath: string;
  bandPath: string;
  errorPath: string;
  markers: Array<{ x: number; y: number; unbounded: boolean }>;
  points: number;
  xOf: (t: number) => number;
  yOf: (v: number) => number;
  yErrOf: (e: number) => number;
}

function extent(values: number[]): [number, number] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of values) {
    if (!isFinite(v)) continue;
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  if (lo > hi) return [0, 1];
  if (lo === hi) return [lo - 1, hi + 1];
  return [lo, hi];
}

export function buildChart(snaps: Snapshot[], layout: ChartLayout = DEFAULT_LAYOUT): ChartGeometry {
  const L = layout;
  const innerW = L.width - L.padLeft - L.padRight;
  const innerH = L.height - L.padTop - L.padBottom;
  const ts = snaps.map((s) => s.timestamp_ms);
  const [t0, t1] = extent(ts.length ? ts : [0]);
  const valueSamples: number[] = [];
  for (const s of snaps) {
    if (isFinite(s.estimate)) valueSamples.push(s.estimate);
    if (isFinite(s.lo)) valueSamples.push(s.lo);
    if (isFinite(s.hi)) valueSamples.push(s.hi);
  }
  const [v0, v1] = extent(valueSamples);
  const errs = snaps.map((s) => s.error_ratio).filter((e) => isFinite(e) && e > 0);
  const eLo = errs.length ? Math.min(...errs) : 1e-3;
  const eHi = errs.length ? Math.max(...errs) : 1.0;
  const logLo = Math.log10(Math.max(eLo, 1e-12));
  const logHi = Math.log10(Math.max(eHi, eLo * 10));

  const xOf = (t: number) => L.padLeft + ((t - t0) / Math.max(t1 - t0, 1e-9)) * innerW;
  const yOf = (v: number) => L.padTop + (1 - (v - v0) / Math.max(v1 - v0, 1e-12)) * innerH;
  const yErrOf = (e: number) => {
    const le = Math.log10(Math.max(e, 1e-12));
    return L.padTop + (1 - (le - logLo) / Math.max(logHi - logLo, 1e-9)) * innerH;
  };

  const linePts: string[] = [];
  const errPts: string[] = [];
  const markers: ChartGeometry['markers'] = [];
  const bandUpper: string[] = [];
  const bandLower: string[] = [];
  for (const s of snaps) {
    const x = xOf(s.timestamp_ms);
    if (isFinite(s.estimate)) {
      linePts.push(`${linePts.length ? 'L' : 'M'}${x.toFixed(1)},${yOf(s.estimate).toFixed(1)}`);
      markers.push({ x, y: yOf(s.estimate), unbounded: s.unbounded });
    }
    if (!s.unbounded) {
      bandUpper.push(`${bandUpper.length ? 'L' : 'M'}${x.toFixed(1)},${yOf(s.hi).toFixed(1)}`);
      bandLower.push(`L${x.toFixed(1)},${yOf(s.lo).toFixed(1)}`);
    }
    if (isFinite(s.error_ratio) && s.error_ratio > 0) {
      errPts.push(`${errPts.length ? 'L' : 'M'}${x.toFixed(1)},${yErrOf(s.error_ratio).toFixed(1)}`);
    }
  }
  const bandPath = bandUpper.length ? bandUpper.join(' ') + ' ' + bandLower.reverse().join(' ').replace(/^L/, 'L') + ' Z' : '';
  return {
    estimatePath: linePts.join(' '),
    bandPath,
    errorPath: errPts.join(' '),
    markers,
    points: snaps.length,
    xOf,
    yOf,
    yErrOf,
  };
}

export function renderSvg(snaps: Snapshot[], layout: ChartLayout = DEFAULT_LAYOUT): string {
  const g = buildChart(snaps, layout);
  const unboundedMarks = g.markers
    .filter((m) => m.unbounded)
    .map((m) => `<circle cx="${m.x.toFixed(1)}" cy="${m.y.toFixed(1)}" r="3" class="unbounded"/>`)
    .join('');
  return (
    `<svg viewBox="0 0 ${layout.width} ${layout.height}" class="chart">` +
    (g.bandPath ? `<path class="band" d="${g.bandPath}"/>` : '') +
    (g.estimatePath ? `<path class="estimate" d="${g.estimatePath}" fill="none"/>` : '') +
    (g.errorPath ? `<path class="error" d="${g.errorPath}" fill="none"/>` : '') +
    unboundedMarks +
    `</svg>`
  );
}
