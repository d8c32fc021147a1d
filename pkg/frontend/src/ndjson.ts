import type { FetchLike } from "./api.js";
import { TERMINAL_EVENTS, type RunEvent } from "./types.js";

export interface EventStreamOptions {
  fetchImpl?: FetchLike;
  /** Base reconnect delay in ms; doubles per consecutive failure. */
  backoffMs?: number;
  maxBackoffMs?: number;
  /** Sleep hook, injectable so tests can run without real timers. */
  sleep?: (ms: number) => Promise<void>;
}

const realSleep = (ms: number): Promise<void> =>
  new Promise((resolve) => setTimeout(resolve, ms));

/** Split an incremental byte stream into complete text lines. */
export class LineSplitter {
  private buffer = "";

  push(chunk: string): string[] {
    this.buffer += chunk;
    const lines = this.buffer.split("\n");
    this.buffer = lines.pop() ?? "";
    return lines.filter((line) => line.length > 0);
  }

  flush(): string[] {
    const rest = this.buffer.trim();
    this.buffer = "";
    return rest ? [rest] : [];
  }
}

/**
 * Newline-delimited JSON subscription to a run's event journal.
 *
 * The server replays the full history and then follows live events, so a
 * dropped connection is recovered by resubscribing from scratch; consumers
 * must treat replayed events as idempotent. The stream ends at the first
 * terminal event (finished/halted/failed).
 */
export class EventStream {
  private stopped = false;
  reconnects = 0;

  constructor(
    private readonly url: string,
    private readonly onEvent: (event: RunEvent) => void,
    private readonly options: EventStreamOptions = {},
  ) {}

  stop(): void {
    this.stopped = true;
  }

  async run(): Promise<void> {
    const fetchImpl = this.options.fetchImpl ??
      ((url: string, init?: RequestInit) => fetch(url, init));
    const sleep = this.options.sleep ?? realSleep;
    const base = this.options.backoffMs ?? 250;
    const max = this.options.maxBackoffMs ?? 4000;
    let failures = 0;
    while (!this.stopped) {
      try {
        const response = await fetchImpl(this.url);
        if (!response.ok || response.body === null) {
          throw new Error(`events unavailable: HTTP ${response.status}`);
        }
        failures = 0;
        if (await this.consume(response.body)) return;
        // Stream ended without a terminal event: connection dropped.
        throw new Error("event stream ended early");
      } catch (err) {
        if (this.stopped) return;
        failures += 1;
        this.reconnects += 1;
        await sleep(Math.min(base * 2 ** (failures - 1), max));
      }
    }
  }

  /** Returns true if a terminal event arrived. */
  private async consume(body: ReadableStream<Uint8Array>): Promise<boolean> {
    const reader = body.getReader();
    const decoder = new TextDecoder();
    const splitter = new LineSplitter();
    try {
      for (;;) {
        const { done, value } = await reader.read();
        const lines = done
          ? splitter.flush()
          : splitter.push(decoder.decode(value, { stream: true }));
        for (const line of lines) {
          const event = JSON.parse(line) as RunEvent;
          this.onEvent(event);
          if (TERMINAL_EVENTS.has(event.type)) return true;
        }
        if (done) return false;
        if (this.stopped) return true;
      }
    } finally {
      reader.releaseLock();
    }
  }
}
