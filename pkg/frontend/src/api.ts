import type {
  DetectionBox,
  ModelInfo,
  PipelineInfo,
  RunInfo,
  RunStats,
  SlideManifest,
} from "./types.js";

export type FetchLike = (
  url: string,
  init?: RequestInit,
) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

async function asJson<T>(response: Response): Promise<T> {
  if (!response.ok) {
    let message = `HTTP ${response.status}`;
    try {
      const body = (await response.json()) as { error?: string };
      if (body.error) message = body.error;
    } catch {
      /* non-JSON error body; keep the status text */
    }
    throw new ApiError(response.status, message);
  }
  return (await response.json()) as T;
}

/** Typed client for every server endpoint; fetch is injectable for tests. */
export class ApiClient {
  constructor(
    readonly base: string = "",
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private url(path: string): string {
    return this.base + path;
  }

  get(path: string): Promise<Response> {
    return this.fetchImpl(this.url(path));
  }

  listSlides(): Promise<SlideManifest[]> {
    return this.get("/slides").then((r) => asJson<SlideManifest[]>(r));
  }

  getSlide(id: string): Promise<SlideManifest> {
    return this.get(`/slides/${id}`).then((r) => asJson<SlideManifest>(r));
  }

  importSlide(body: {
    name: string;
    width?: number;
    height?: number;
    seed?: number;
  }): Promise<SlideManifest> {
    return this.fetchImpl(this.url("/slides/import"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    }).then((r) => asJson<SlideManifest>(r));
  }

  tileUrl(slideId: string, level: number, col: number, row: number,
          fallback = true): string {
    const suffix = fallback ? "?fallback=1" : "";
    return this.url(`/slides/${slideId}/tiles/${level}/${col}/${row}${suffix}`);
  }

  tissuePreviewUrl(slideId: string, threshold: number, radius: number,
                   downsample: number): string {
    return this.url(
      `/slides/${slideId}/tissue-preview?threshold=${threshold}` +
        `&radius=${radius}&downsample=${downsample}`,
    );
  }

  listModels(): Promise<ModelInfo[]> {
    return this.get("/models").then((r) => asJson<ModelInfo[]>(r));
  }

  listPipelines(): Promise<PipelineInfo[]> {
    return this.get("/pipelines").then((r) => asJson<PipelineInfo[]>(r));
  }

  savePipeline(name: string, text: string): Promise<PipelineInfo> {
    return this.fetchImpl(this.url("/pipelines"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ name, text }),
    }).then((r) => asJson<PipelineInfo>(r));
  }

  startRun(slideId: string, pipeline: string): Promise<RunInfo> {
    return this.fetchImpl(this.url(`/slides/${slideId}/runs`), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ pipeline }),
    }).then((r) => asJson<RunInfo>(r));
  }

  getRun(runId: string): Promise<RunInfo> {
    return this.get(`/runs/${runId}`).then((r) => asJson<RunInfo>(r));
  }

  haltRun(runId: string): Promise<RunInfo> {
    return this.fetchImpl(this.url(`/runs/${runId}/halt`), {
      method: "POST",
    }).then((r) => asJson<RunInfo>(r));
  }

  eventsUrl(runId: string): string {
    return this.url(`/runs/${runId}/events`);
  }

  overlayUrl(runId: string, level: number, col: number, row: number): string {
    return this.url(`/runs/${runId}/overlay/${level}/${col}/${row}`);
  }

  getDetections(runId: string, snapshot = false): Promise<{
    run_id: string;
    detections: DetectionBox[];
  }> {
    const suffix = snapshot ? "?snapshot=1" : "";
    return this.get(`/runs/${runId}/detections${suffix}`).then((r) =>
      asJson<{ run_id: string; detections: DetectionBox[] }>(r),
    );
  }

  getStats(runId: string, snapshot = false): Promise<RunStats> {
    const suffix = snapshot ? "?snapshot=1" : "";
    return this.get(`/runs/${runId}/stats${suffix}`).then((r) =>
      asJson<RunStats>(r),
    );
  }

  exportUrl(runId: string, format: "mhd" | "csv"): string {
    return this.url(`/runs/${runId}/export?format=${format}`);
  }
}
