import { describe, expect, it } from "vitest";
import { ApiClient, ApiError } from "../src/api.js";
import { formatStats } from "../src/stats.js";
import type { ModelInfo, RunStats } from "../src/types.js";

const GRADER: ModelInfo = {
  name: "grader",
  task: "patch_classification",
  num_classes: 3,
  class_names: ["benign", "grade 1", "grade 2"],
};

describe("formatStats", () => {
  it("renders a classification histogram with names and percentages", () => {
    const stats: RunStats = {
      run_id: "r",
      state: "finished",
      histogram: { "0": 6, "1": 3, "2": 1 },
      slide_level_call: 0,
      slide_level_class: "benign",
    };
    const rows = formatStats(stats, GRADER);
    expect(rows).toEqual([
      { label: "state", value: "finished" },
      { label: "benign", value: "6 patches (60.0%)" },
      { label: "grade 1", value: "3 patches (30.0%)" },
      { label: "grade 2", value: "1 patches (10.0%)" },
      { label: "slide-level call", value: "benign" },
    ]);
  });

  it("renders segmentation pixel counts plus the unprocessed tally", () => {
    const stats: RunStats = {
      run_id: "r",
      state: "halted",
      pixel_counts: { "0": 900, "1": 100 },
      unprocessed_pixels: 24,
    };
    const rows = formatStats(stats);
    expect(rows).toEqual([
      { label: "state", value: "halted" },
      { label: "class 0", value: "900 px" },
      { label: "class 1", value: "100 px" },
      { label: "unprocessed", value: "24 px" },
    ]);
  });

  it("renders detection counts, including the empty case", () => {
    const rows = formatStats({
      run_id: "r",
      state: "finished",
      detection_counts: { "0": 17 },
    });
    expect(rows).toContainEqual({ label: "class 0", value: "17 detections" });
    const empty = formatStats({
      run_id: "r",
      state: "finished",
      detection_counts: {},
    });
    expect(empty).toContainEqual({ label: "detections", value: "0" });
  });
});

describe("ApiClient", () => {
  it("unwraps the error envelope into a typed failure", async () => {
    const api = new ApiClient("", async () =>
      new Response(JSON.stringify({ error: "slide not found" }), {
        status: 404,
      }),
    );
    const err = await api.getSlide("nope").catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(404);
    expect((err as ApiError).message).toBe("slide not found");
  });

  it("falls back to the HTTP status for non-JSON error bodies", async () => {
    const api = new ApiClient("", async () =>
      new Response("<html>oops</html>", { status: 500 }),
    );
    const err = await api.listSlides().catch((e: unknown) => e);
    expect((err as ApiError).message).toBe("HTTP 500");
  });

  it("builds tile and preview URLs against the base", () => {
    const api = new ApiClient("http://host:8000", async () =>
      new Response("{}"),
    );
    expect(api.tileUrl("s", 1, 2, 3)).toBe(
      "http://host:8000/slides/s/tiles/1/2/3?fallback=1");
    expect(api.tileUrl("s", 1, 2, 3, false)).toBe(
      "http://host:8000/slides/s/tiles/1/2/3");
    expect(api.overlayUrl("r", 0, 4, 5)).toBe(
      "http://host:8000/runs/r/overlay/0/4/5");
    expect(api.exportUrl("r", "csv")).toBe(
      "http://host:8000/runs/r/export?format=csv");
  });

  it("posts run starts as JSON", async () => {
    let captured: { url: string; body: unknown } | undefined;
    const api = new ApiClient("", async (url, init) => {
      captured = { url, body: JSON.parse(String(init?.body)) };
      return new Response(JSON.stringify({
        run_id: "r", slide_id: "s", pipeline: "p", task: "t",
        state: "running", done: 0, total: 0, level: 0,
        grid_cols: 0, grid_rows: 0,
      }), { status: 202 });
    });
    const info = await api.startRun("s", "p");
    expect(info.run_id).toBe("r");
    expect(captured).toEqual({
      url: "/slides/s/runs",
      body: { pipeline: "p" },
    });
  });
});
