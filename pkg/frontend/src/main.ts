import { httpBackend } from './api.js';
import { renderSvg } from './chart.js';
import { LiveQueryView } from './state.js';

const backend = httpBackend('');

const el = (id: string) => document.getElementById(id)!;

function fmt(v: number | null | undefined): string {
  if (v === null || v === undefined || Number.isNaN(v)) return '–';
  if (!isFinite(v)) return '∞';
  if (Math.abs(v) >= 1e6 || (Math.abs(v) < 1e-3 && v !== 0)) return v.toExponential(3);
  return v.toLocaleString(undefined, { maximumFractionDigits: 4 });
}

const view = new LiveQueryView(backend, render);

function render(): void {
  const badge = el('badge');
  badge.textContent = view.phase;
  badge.className = `badge ${view.terminal ? 'terminal' : 'live'} ${view.phase.toLowerCase()}`;
  el('error').textContent = view.inlineError ?? '';

  const last = view.lastSnapshot;
  el('estimate').textContent = fmt(last?.estimate);
  el('errratio').textContent = fmt(last?.error_ratio);
  el('progress').textContent = last
    ? `${last.n_chunks} chunks in estimate · ${last.tuples.toLocaleString()} tuples · ` +
      `${last.chunks_read} chunks read · ${(last.bytes_read / 1048576).toFixed(1)} MiB · ${last.regime}`
    : '';
  el('chart').innerHTML = view.snapshots.length
    ? renderSvg(view.snapshots)
    : '<div class="waiting">waiting for snapshots…</div>';
  el('points').textContent = String(view.eventsReceived);

  (el('start') as HTMLButtonElement).disabled = !view.controls.start;
  (el('stop') as HTMLButtonElement).disabled = !view.controls.stop;
  (el('rerun') as HTMLButtonElement).disabled = !view.controls.rerun;
}

function formValue(): Parameters<LiveQueryView['start']>[0] {
  return {
    file: (el('file') as HTMLSelectElement).value,
    sql: (el('sql') as HTMLInputElement).value,
    epsilon: Number((el('epsilon') as HTMLInputElement).value),
    delta_ms: Number((el('delta') as HTMLInputElement).value),
    strategy: (el('strategy') as HTMLSelectElement).value,
    threads: Number((el('threads') as HTMLInputElement).value),
  };
}

async function refreshFiles(): Promise<void> {
  try {
    const files = await backend.listFiles();
    const sel = el('file') as HTMLSelectElement;
    sel.innerHTML = files
      .map((f) => `<option value="${f.name}">${f.name}${f.chunks ? ` (${f.chunks} chunks)` : ''}</option>`)
      .join('');
  } catch {
    el('error').textContent = 'service unreachable';
  }
}

async function refreshSynopsis(): Promise<void> {
  try {
    const syn = await backend.getSynopsis();
    const rows = Object.entries(syn).map(([file, s]) =>
      `<tr><td>${file.split('/').pop()}</td><td>${s.chunks_present}</td>` +
      `<td>${s.retained_tuples.toLocaleString()} / ${s.budget_tuples.toLocaleString()}</td></tr>`);
    el('synopsis').innerHTML = rows.length
      ? `<table><tr><th>file</th><th>chunks</th><th>retained / budget</th></tr>${rows.join('')}</table>`
      : '<em>empty</em>';
  } catch {
    /* panel is best-effort */
  }
}

el('start').addEventListener('click', async () => {
  await view.start(formValue());
  refreshSynopsis();
});
el('stop').addEventListener('click', () => view.stop());
el('rerun').addEventListener('click', async () => {
  const eps = Number((el('epsilon') as HTMLInputElement).value);
  await view.rerun(eps);
  refreshSynopsis();
});

refreshFiles();
refreshSynopsis();
render();
setInterval(refreshSynopsis, 5000);
