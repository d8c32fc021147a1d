import type { ApiClient } from "./api.js";
import { debounce, type Debounced } from "./debounce.js";

export interface PreviewLayer {
  url: string;
  bytes: ArrayBuffer;
  threshold: number;
  radius: number;
  downsample: number;
}

export interface PreviewOptions {
  debounceMs?: number;
  downsample?: number;
  onPreview?: (layer: PreviewLayer) => void;
  onError?: (message: string) => void;
}

export const MAX_COLOR_DISTANCE = 255 * Math.sqrt(3);

/**
 * Advanced-mode controller: threshold/radius sliders feed a debounced
 * tissue-preview request; each response replaces the previous layer, and
 * stale responses (outrun by a newer request) are dropped.
 */
export class PreviewController {
  threshold = 30;
  radius = 2;
  requests = 0;
  private version = 0;
  private readonly schedule: Debounced<[]>;

  constructor(
    private readonly api: ApiClient,
    private readonly slideId: string,
    private readonly options: PreviewOptions = {},
  ) {
    this.schedule = debounce(() => {
      void this.fetchPreview();
    }, options.debounceMs ?? 150);
  }

  setThreshold(value: number): void {
    this.threshold = Math.min(Math.max(value, 0), MAX_COLOR_DISTANCE);
    this.schedule();
  }

  setRadius(value: number): void {
    this.radius = Math.max(0, Math.round(value));
    this.schedule();
  }

  /** Skip the debounce (initial render). */
  refreshNow(): void {
    this.schedule.cancel();
    void this.fetchPreview();
  }

  stop(): void {
    this.schedule.cancel();
  }

  private async fetchPreview(): Promise<void> {
    const { threshold, radius } = this;
    const downsample = this.options.downsample ?? 4;
    const version = ++this.version;
    this.requests += 1;
    const path =
      `/slides/${this.slideId}/tissue-preview?threshold=${threshold}` +
      `&radius=${radius}&downsample=${downsample}`;
    try {
      const response = await this.api.get(path);
      if (!response.ok) {
        let message = `HTTP ${response.status}`;
        try {
          const body = (await response.json()) as { error?: string };
          if (body.error) message = body.error;
        } catch {
          /* keep the fallback message */
        }
        this.options.onError?.(message);
        return;
      }
      const bytes = await response.arrayBuffer();
      if (version !== this.version) return; // a newer request finished
      this.options.onPreview?.({
        url: this.api.base + path,
        bytes,
        threshold,
        radius,
        downsample,
      });
    } catch (err) {
      this.options.onError?.(String(err));
    }
  }
}
