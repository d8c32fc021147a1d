import { afterEach, describe, expect, it, vi } from "vitest";
import { ApiClient } from "../src/api.js";
import {
  MAX_COLOR_DISTANCE,
  PreviewController,
  type PreviewLayer,
} from "../src/preview.js";

function okBody(): Response {
  return new Response(new Uint8Array([1, 2, 3]), { status: 200 });
}

async function drain(): Promise<void> {
  await new Promise((resolve) => setTimeout(resolve, 0));
}

afterEach(() => {
  vi.useRealTimers();
});

describe("PreviewController", () => {
  it("collapses a burst of slider wiggles into one trailing request", async () => {
    vi.useFakeTimers();
    const urls: string[] = [];
    const api = new ApiClient("", async (url) => {
      urls.push(url);
      return okBody();
    });
    const pc = new PreviewController(api, "s", { debounceMs: 150 });
    for (let i = 0; i < 30; i += 1) {
      pc.setThreshold(20 + i);
      await vi.advanceTimersByTimeAsync(33);
    }
    // the quiet period never elapsed, so nothing was sent yet
    expect(pc.requests).toBe(0);
    await vi.advanceTimersByTimeAsync(150);
    expect(pc.requests).toBe(1);
    expect(urls[0]).toContain("threshold=49");
  });

  it("keeps the sustained rate at or below 8 requests per second", async () => {
    vi.useFakeTimers();
    let requests = 0;
    const api = new ApiClient("", async () => {
      requests += 1;
      return okBody();
    });
    const pc = new PreviewController(api, "s", { debounceMs: 150 });
    // adversarial pacing: each wiggle lands just after the debounce fires
    const wiggles = 33;
    const stepMs = 151;
    for (let i = 0; i < wiggles; i += 1) {
      pc.setThreshold(10 + i);
      await vi.advanceTimersByTimeAsync(stepMs);
    }
    expect(requests).toBe(wiggles);
    const elapsedSeconds = (wiggles * stepMs) / 1000;
    expect(requests).toBeLessThanOrEqual(8 * elapsedSeconds);
  });

  it("sends threshold zero explicitly", async () => {
    vi.useFakeTimers();
    const urls: string[] = [];
    const api = new ApiClient("", async (url) => {
      urls.push(url);
      return okBody();
    });
    const pc = new PreviewController(api, "slide-a", { debounceMs: 50 });
    pc.setThreshold(0);
    await vi.advanceTimersByTimeAsync(50);
    expect(urls).toHaveLength(1);
    expect(urls[0]).toBe(
      "/slides/slide-a/tissue-preview?threshold=0&radius=2&downsample=4");
  });

  it("clamps threshold and radius to their valid ranges", () => {
    const api = new ApiClient("", async () => okBody());
    const pc = new PreviewController(api, "s");
    pc.setThreshold(-5);
    expect(pc.threshold).toBe(0);
    pc.setThreshold(10_000);
    expect(pc.threshold).toBe(MAX_COLOR_DISTANCE);
    pc.setRadius(-3);
    expect(pc.radius).toBe(0);
    pc.setRadius(2.6);
    expect(pc.radius).toBe(3);
    pc.stop();
  });

  it("drops a stale response that loses the race", async () => {
    const resolvers: ((r: Response) => void)[] = [];
    const api = new ApiClient("", (url) => {
      void url;
      return new Promise((resolve) => resolvers.push(resolve));
    });
    const layers: PreviewLayer[] = [];
    const pc = new PreviewController(api, "s", {
      onPreview: (layer) => layers.push(layer),
    });
    pc.setThreshold(10);
    pc.refreshNow();
    pc.setThreshold(99);
    pc.refreshNow();
    expect(pc.requests).toBe(2);
    resolvers[1](okBody());
    await drain();
    resolvers[0](okBody());
    await drain();
    expect(layers).toHaveLength(1);
    expect(layers[0].threshold).toBe(99);
  });

  it("reports server rejections through onError", async () => {
    const api = new ApiClient("", async () =>
      new Response(JSON.stringify({ error: "threshold out of range" }), {
        status: 400,
      }),
    );
    const errors: string[] = [];
    const layers: PreviewLayer[] = [];
    const pc = new PreviewController(api, "s", {
      onPreview: (layer) => layers.push(layer),
      onError: (message) => errors.push(message),
    });
    pc.refreshNow();
    await drain();
    expect(errors).toEqual(["threshold out of range"]);
    expect(layers).toHaveLength(0);
  });
});
