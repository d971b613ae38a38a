import type { ApiClient } from "./api.js";
import type { LedgerEvent } from "./types.js";

// Resumable event feed. Events arrive in ledger-commit order; the feed
// tracks the last acknowledged id so a reconnect (or page reload) replays
// from the right place. Polling keeps the client dependency-free and works
// in tests; the wire format matches the service's SSE stream ids.

export class EventFeed {
  lastId = -1;
  private timer: ReturnType<typeof setInterval> | null = null;
  private listeners: ((ev: LedgerEvent) => void)[] = [];

  constructor(private api: ApiClient, private intervalMs = 500) {}

  onEvent(fn: (ev: LedgerEvent) => void) {
    this.listeners.push(fn);
  }

  async pull(): Promise<LedgerEvent[]> {
    const batch = await this.api.events(this.lastId);
    const out: LedgerEvent[] = [];
    for (const ev of batch.events) {
      if (ev.event_id <= this.lastId) continue; // replayed duplicates are dropped
      this.lastId = ev.event_id;
      out.push(ev);
      for (const fn of this.listeners) fn(ev);
    }
    return out;
  }

  start() {
    if (this.timer) return;
    this.timer = setInterval(() => {
      void this.pull().catch(() => undefined);
    }, this.intervalMs);
  }

  stop() {
    if (this.timer) clearInterval(this.timer);
    this.timer = null;
  }
}
