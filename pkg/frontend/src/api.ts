import { QueryRequest, RunSummary } from './types.js';

/** Minimal event-stream surface so tests can inject a fake. */
export interface EventStream {
  onEvent(name: string, handler: (data: string) => void): void;
  onError(handler: () => void): void;
  close(): void;
}

export interface Backend {
  startQuery(req: QueryRequest): Promise<{ id: string }>;
  stopQuery(id: string): Promise<{ state: string }>;
  getRun(id: string): Promise<RunSummary>;
  listFiles(): Promise<Array<{ name: string; chunks?: number; tuples?: number }>>;
  getSynopsis(): Promise<Record<string, { chunks_present: number; retained_tuples: number; budget_tuples: number }>>;
  openEvents(id: string): EventStream;
}

export class HttpError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function asJson(resp: Response): Promise<any> {
  const body = await resp.json().catch(() => ({}));
  if (!resp.ok) throw new HttpError(resp.status, body.error ?? body.state ?? resp.statusText);
  return body;
}

export function httpBackend(base = ''): Backend {
  return {
    async startQuery(req) {
      return asJson(await fetch(`${base}/queries`, {
        method: 'POST',
        headers: { 'Content-Type': 'application/json' },
        body: JSON.stringify(req),
      }));
    },
    async stopQuery(id) {
      return asJson(await fetch(`${base}/queries/${id}/stop`, { method: 'POST' }));
    },
    async getRun(id) {
      return asJson(await fetch(`${base}/queries/${id}`));
    },
    async listFiles() {
      return asJson(await fetch(`${base}/files`));
    },
    async getSynopsis() {
      return asJson(await fetch(`${base}/synopsis`));
    },
    openEvents(id) {
      const es = new EventSource(`${base}/queries/${id}/events`);
      return {
        onEvent(name, handler) {
          es.addEventListener(name, (ev) => handler((ev as MessageEvent).data));
        },
        onError(handler) {
          es.onerror = () => handler();
        },
        close() {
          es.close();
        },
      };
    },
  };
}
