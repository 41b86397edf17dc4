import { Backend, EventStream, HttpError } from './api.js';
import { QueryRequest, RunStateName, Snapshot, parseTraceLine } from './types.js';

export type Phase = 'IDLE' | 'STARTING' | 'RUNNING' | RunStateName;

const TERMINAL: ReadonlySet<string> = new Set([
  'SATISFIED',
  'STOPPED_BY_USER',
  'EXACT_COMPLETE',
  'FAILED',
]);

/** Live view of one query run: an append-only snapshot series fed by the
 * event stream, a state badge, and the steering actions. Values shown are
 * exactly the streamed ones; nothing is recomputed client-side. */
export class LiveQueryView {
  snapshots: Snapshot[] = [];
  phase: Phase = 'IDLE';
  runId: string | null = null;
  inlineError: string | null = null;
  eventsReceived = 0;
  private stream: EventStream | null = null;
  private reconnected = false;
  private lastForm: QueryRequest | null = null;

  constructor(
    private backend: Backend,
    private onChange: () => void = () => {},
  ) {}

  get terminal(): boolean {
    return TERMINAL.has(this.phase);
  }

  /** Steering controls availability: start only when idle/terminal, stop
   * only while running, rerun only after a terminal state. */
  get controls(): { start: boolean; stop: boolean; rerun: boolean } {
    return {
      start: this.phase === 'IDLE' || this.terminal,
      stop: this.phase === 'RUNNING',
      rerun: this.terminal && this.lastForm !== null,
    };
  }

  get lastSnapshot(): Snapshot | null {
    return this.snapshots.length ? this.snapshots[this.snapshots.length - 1] : null;
  }

  async start(form: QueryRequest): Promise<boolean> {
    if (!this.controls.start) return false;
    this.inlineError = null;
    this.phase = 'STARTING';
    this.snapshots = [];
    this.eventsReceived = 0;
    this.reconnected = false;
    this.onChange();
    try {
      const { id } = await this.backend.startQuery(form);
      this.runId = id;
      this.lastForm = form;
      this.phase = 'RUNNING';
      this.subscribe(id);
      this.onChange();
      return true;
    } catch (e) {
      // a rejected query creates no run: stay idle with the inline message
      this.inlineError = e instanceof HttpError ? e.message : String(e);
      this.phase = 'IDLE';
      this.runId = null;
      this.onChange();
      return false;
    }
  }

  async stop(): Promise<void> {
    if (!this.runId || this.terminal) return;
    try {
      await this.backend.stopQuery(this.runId);
    } catch (e) {
      if (!(e instanceof HttpError && e.status === 409)) {
        this.inlineError = String(e);
        this.onChange();
      }
    }
  }

  /** Re-run the last query, optionally at a new accuracy target; the
   * server reuses its warm synopsis (chunks_read=0 when served from it). */
  async rerun(epsilon?: number): Promise<boolean> {
    if (!this.lastForm) return false;
    const form = { ...this.lastForm, epsilon: epsilon ?? this.lastForm.epsilon };
    return this.start(form);
  }

  private subscribe(id: string): void {
    this.stream?.close();
    const stream = this.backend.openEvents(id);
    this.stream = stream;
    stream.onEvent('snapshot', (data) => {
      this.snapshots.push(parseTraceLine(data));
      this.eventsReceived += 1;
      this.onChange();
    });
    stream.onEvent('terminal', (data) => {
      this.phase = (TERMINAL.has(data) ? data : 'FAILED') as Phase;
      stream.close();
      this.onChange();
    });
    stream.onError(() => {
      stream.close();
      if (!this.terminal && !this.reconnected) {
        this.reconnected = true;
        this.subscribe(id);  // one automatic reconnect, then give up
      } else if (!this.terminal) {
        this.inlineError = 'event stream lost';
        this.onChange();
      }
    });
  }
}
