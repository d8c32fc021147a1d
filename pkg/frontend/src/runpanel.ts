import type { ApiClient } from "./api.js";
import { EventStream, type EventStreamOptions } from "./ndjson.js";
import type { OverlayStore } from "./overlay.js";
import type { Rect, RunEvent, RunInfo, RunState } from "./types.js";

export interface RunPanelOptions {
  stream?: EventStreamOptions;
  /** Called after overlay tiles affected by a region were refetched. */
  onOverlayUpdate?: (region: Rect) => void;
  onProgress?: (done: number, total: number) => void;
  onStateChange?: (state: RunState) => void;
  onError?: (message: string) => void;
}

/**
 * Drives one pipeline run: starts it, follows the event stream, keeps
 * monotone progress, refetches exactly the overlay tiles each committed
 * region touches, and posts halts. Replayed events after a reconnect are
 * absorbed idempotently (progress is a max, refetches overwrite).
 */
export class RunController {
  info: RunInfo | null = null;
  done = 0;
  total = 0;
  state: RunState = "running";
  overlayUpdates = 0;
  private stream: EventStream | null = null;
  private streamDone: Promise<void> = Promise.resolve();

  constructor(
    private readonly api: ApiClient,
    private readonly overlays: OverlayStore | null,
    private readonly options: RunPanelOptions = {},
  ) {}

  async start(slideId: string, pipeline: string): Promise<RunInfo> {
    const info = await this.api.startRun(slideId, pipeline);
    this.attach(info);
    return info;
  }

  /** Follow an already-started run (page reload). */
  attach(info: RunInfo): void {
    this.info = info;
    this.done = info.done;
    this.total = info.total;
    this.state = info.state;
    this.stream = new EventStream(
      this.api.eventsUrl(info.run_id),
      (event) => this.handle(event),
      this.options.stream,
    );
    this.streamDone = this.stream.run();
  }

  async halt(): Promise<void> {
    if (this.info === null) return;
    await this.api.haltRun(this.info.run_id);
  }

  /** Resolves when the event stream saw a terminal event. */
  finished(): Promise<void> {
    return this.streamDone;
  }

  stop(): void {
    this.stream?.stop();
  }

  private handle(event: RunEvent): void {
    switch (event.type) {
      case "started":
        this.total = event.total;
        break;
      case "progress":
        if (event.done > this.done) {
          this.done = event.done;
          this.options.onProgress?.(this.done, this.total);
        }
        break;
      case "region": {
        const region: Rect = {
          x: event.x, y: event.y, w: event.w, h: event.h,
        };
        if (this.overlays !== null) {
          void this.overlays.invalidate(region).then(() => {
            this.overlayUpdates += 1;
            this.options.onOverlayUpdate?.(region);
          });
        }
        break;
      }
      case "finished":
      case "halted":
        this.state = event.type;
        this.options.onStateChange?.(this.state);
        break;
      case "failed":
        this.state = "failed";
        this.options.onStateChange?.(this.state);
        this.options.onError?.(
          event.error ?? "pipeline failed",
        );
        break;
    }
  }
}
