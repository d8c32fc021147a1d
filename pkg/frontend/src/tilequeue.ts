/**
 * Bounded-concurrency async fetcher with per-key deduplication and retry.
 * Keeps at most `limit` loads in flight so tile bursts cannot starve the
 * event stream; extra requests queue in arrival order.
 */
export class TileQueue<T> {
  private inflight = new Map<string, Promise<T>>();
  private active = 0;
  private waiters: (() => void)[] = [];
  peakActive = 0;

  constructor(
    private readonly load: (id: string) => Promise<T>,
    private readonly limit = 8,
    private readonly retries = 2,
  ) {
    if (limit < 1) throw new Error("concurrency limit must be >= 1");
  }

  private async acquire(): Promise<void> {
    while (this.active >= this.limit) {
      await new Promise<void>((resolve) => this.waiters.push(resolve));
    }
    this.active += 1;
    this.peakActive = Math.max(this.peakActive, this.active);
  }

  private release(): void {
    this.active -= 1;
    const next = this.waiters.shift();
    if (next !== undefined) next();
  }

  request(id: string): Promise<T> {
    const existing = this.inflight.get(id);
    if (existing !== undefined) return existing;
    const promise = this.run(id).finally(() => {
      this.inflight.delete(id);
    });
    this.inflight.set(id, promise);
    return promise;
  }

  private async run(id: string): Promise<T> {
    await this.acquire();
    try {
      let lastError: unknown;
      for (let attempt = 0; attempt <= this.retries; attempt += 1) {
        try {
          return await this.load(id);
        } catch (err) {
          lastError = err;
        }
      }
      throw lastError;
    } finally {
      this.release();
    }
  }
}
