/**
 * Session state machine for the triage UI.
 *
 * Every number shown on screen (projection, verdicts, progress) comes from a
 * server response stored here verbatim; the store never recomputes model
 * math client-side. Threshold changes are debounced so at most one PUT is
 * in flight; decisions update optimistically and roll back on failure.
 */

import { ApiError, Projection, QueueItem, Report, TriageApi, Verdict } from "./api.js";

export interface SessionState {
  sessionId: string;
  /** Slider position; may run ahead of the acknowledged value. */
  sliderDelta: number;
  /** Last server-acknowledged threshold. */
  acknowledgedDelta: number;
  projection: Projection | null;
  items: QueueItem[];
  nextCursor: number | null;
  totalModules: number;
  decisions: Record<string, string>;
  decidedCount: number;
  pendingDecisions: Set<number>;
  toast: string | null;
  complete: boolean;
  finalReport: Report | null;
}

export type Listener = (state: SessionState) => void;

type TimerHandle = ReturnType<typeof setTimeout>;

export interface StoreOptions {
  debounceMs?: number;
  pageSize?: number;
  setTimer?: (fn: () => void, ms: number) => TimerHandle;
  clearTimer?: (handle: TimerHandle) => void;
}

export class SessionStore {
  readonly state: SessionState;
  private listeners: Listener[] = [];
  private debounceMs: number;
  private pageSize: number;
  private setTimer: (fn: () => void, ms: number) => TimerHandle;
  private clearTimer: (handle: TimerHandle) => void;
  private debounceHandle: TimerHandle | null = null;
  private thresholdInFlight = false;
  private pendingDelta: number | null = null;

  constructor(
    private api: TriageApi,
    sessionId: string,
    options: StoreOptions = {},
  ) {
    this.debounceMs = options.debounceMs ?? 250;
    this.pageSize = options.pageSize ?? 20;
    this.setTimer = options.setTimer ?? ((fn, ms) => setTimeout(fn, ms));
    this.clearTimer = options.clearTimer ?? ((h) => clearTimeout(h));
    this.state = {
      sessionId,
      sliderDelta: 0.1,
      acknowledgedDelta: 0.1,
      projection: null,
      items: [],
      nextCursor: null,
      totalModules: 0,
      decisions: {},
      decidedCount: 0,
      pendingDecisions: new Set(),
      toast: null,
      complete: false,
      finalReport: null,
    };
  }

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private emit(): void {
    for (const listener of this.listeners) listener(this.state);
  }

  /** Load (or reload after a page refresh): report first, then the queue. */
  async load(): Promise<void> {
    const report = await this.api.getReport(this.state.sessionId);
    this.state.sliderDelta = report.delta;
    this.state.acknowledgedDelta = report.delta;
    this.state.projection = report.projection;
    this.state.decisions = { ...report.progress.decisions };
    this.state.decidedCount = report.progress.decided;
    this.state.totalModules = report.progress.total;
    this.state.items = [];
    this.state.nextCursor = 0;
    this.emit();
    await this.fetchNextPage();
    this.refreshCompletion();
  }

  /** Fetch the next queue page; server order is preserved as-is. */
  async fetchNextPage(): Promise<void> {
    if (this.state.nextCursor === null) return;
    try {
      const page = await this.api.getQueue(
        this.state.sessionId,
        this.state.nextCursor,
        this.pageSize,
      );
      this.state.items = this.state.items.concat(page.items);
      this.state.nextCursor = page.next_cursor;
      this.state.totalModules = page.total;
      this.emit();
    } catch (err) {
      this.state.toast = `queue fetch failed: ${describe(err)}`;
      this.emit();
    }
  }

  /** Refetch the queue from the start, keeping decisions and projection. */
  private async refetchQueue(): Promise<void> {
    this.state.items = [];
    this.state.nextCursor = 0;
    await this.fetchNextPage();
  }

  /**
   * Slider moved. The PUT is debounced; only the latest value is sent and
   * at most one request is in flight at any time.
   */
  adjustThreshold(delta: number): void {
    this.state.sliderDelta = delta;
    this.pendingDelta = delta;
    this.emit();
    if (this.debounceHandle !== null) this.clearTimer(this.debounceHandle);
    this.debounceHandle = this.setTimer(() => {
      this.debounceHandle = null;
      void this.flushThreshold();
    }, this.debounceMs);
  }

  private async flushThreshold(): Promise<void> {
    if (this.thresholdInFlight || this.pendingDelta === null) return;
    const delta = this.pendingDelta;
    this.pendingDelta = null;
    this.thresholdInFlight = true;
    try {
      const projection = await this.api.setThreshold(this.state.sessionId, delta);
      this.state.projection = projection;
      this.state.acknowledgedDelta = projection.delta;
      this.emit();
      await this.refetchQueue();
    } catch (err) {
      // Rejected threshold: revert the slider to the acknowledged value.
      this.state.sliderDelta = this.state.acknowledgedDelta;
      this.state.toast = `threshold rejected: ${describe(err)}`;
      this.emit();
    } finally {
      this.thresholdInFlight = false;
      if (this.pendingDelta !== null) await this.flushThreshold();
    }
  }

  /** Optimistic decision submit with rollback on failure. */
  async submitDecision(moduleId: number, verdict: Verdict): Promise<void> {
    if (this.state.pendingDecisions.has(moduleId)) return;
    const key = String(moduleId);
    const previous = Object.prototype.hasOwnProperty.call(this.state.decisions, key)
      ? this.state.decisions[key]
      : undefined;
    this.state.decisions[key] = verdict;
    this.state.pendingDecisions.add(moduleId);
    this.recountDecided();
    this.emit();
    try {
      const ack = await this.api.recordDecision(this.state.sessionId, moduleId, verdict);
      this.state.decidedCount = ack.decided;
      this.state.pendingDecisions.delete(moduleId);
      this.emit();
      await this.refreshCompletion();
    } catch (err) {
      this.state.pendingDecisions.delete(moduleId);
      if (previous === undefined) {
        delete this.state.decisions[key];
      } else {
        this.state.decisions[key] = previous;
      }
      this.recountDecided();
      if (err instanceof ApiError && err.status === 404) {
        this.state.items = this.state.items.filter((i) => i.module_id !== moduleId);
        this.state.toast = `module ${moduleId} no longer exists`;
      } else {
        this.state.toast = `decision failed: ${describe(err)}`;
      }
      this.emit();
    }
  }

  private recountDecided(): void {
    this.state.decidedCount = Object.keys(this.state.decisions).length;
  }

  private async refreshCompletion(): Promise<void> {
    if (this.state.totalModules > 0 && this.state.decidedCount >= this.state.totalModules) {
      try {
        this.state.finalReport = await this.api.getReport(this.state.sessionId);
        this.state.complete = true;
        this.emit();
      } catch {
        // completion screen will retry on the next decision
      }
    }
  }

  dismissToast(): void {
    this.state.toast = null;
    this.emit();
  }
}

function describe(err: unknown): string {
  if (err instanceof ApiError) return `${err.status} ${err.message}`;
  return err instanceof Error ? err.message : String(err);
}
