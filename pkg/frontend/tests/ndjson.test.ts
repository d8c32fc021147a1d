import { describe, expect, it } from "vitest";
import { EventStream, LineSplitter } from "../src/ndjson.js";
import type { RunEvent } from "../src/types.js";

describe("LineSplitter", () => {
  it("reassembles lines across chunk boundaries", () => {
    const splitter = new LineSplitter();
    expect(splitter.push('{"a"')).toEqual([]);
    expect(splitter.push(': 1}\n{"b": 2}\n{"c"')).toEqual([
      '{"a": 1}',
      '{"b": 2}',
    ]);
    expect(splitter.flush()).toEqual(['{"c"']);
  });

  it("drops blank lines", () => {
    const splitter = new LineSplitter();
    expect(splitter.push("\n\nx\n\n")).toEqual(["x"]);
  });
});

const ndjson = (events: object[]): string =>
  events.map((e) => JSON.stringify(e) + "\n").join("");

function streamOf(...chunks: string[]): ReadableStream<Uint8Array> {
  const encoder = new TextEncoder();
  return new ReadableStream({
    start(controller) {
      for (const chunk of chunks) controller.enqueue(encoder.encode(chunk));
      controller.close();
    },
  });
}

describe("EventStream", () => {
  it("replays a finished journal and stops at the terminal event", async () => {
    const events: RunEvent[] = [];
    const body = ndjson([
      { type: "started", run_id: "r1", total: 2 },
      { type: "progress", done: 1, total: 2 },
      { type: "progress", done: 2, total: 2 },
      { type: "finished" },
    ]);
    const stream = new EventStream("/events", (e) => events.push(e), {
      fetchImpl: async () => new Response(body),
    });
    await stream.run();
    expect(events.map((e) => e.type)).toEqual([
      "started", "progress", "progress", "finished",
    ]);
    expect(stream.reconnects).toBe(0);
  });

  it("parses events split across arbitrary chunks", async () => {
    const events: RunEvent[] = [];
    const text = ndjson([
      { type: "progress", done: 1, total: 3 },
      { type: "finished" },
    ]);
    const stream = new EventStream("/events", (e) => events.push(e), {
      fetchImpl: async () =>
        new Response(streamOf(text.slice(0, 7), text.slice(7, 31),
                              text.slice(31))),
    });
    await stream.run();
    expect(events.map((e) => e.type)).toEqual(["progress", "finished"]);
  });

  it("resubscribes after a dropped connection", async () => {
    let calls = 0;
    const slept: number[] = [];
    const stream = new EventStream(
      "/events",
      () => undefined,
      {
        fetchImpl: async () => {
          calls += 1;
          if (calls === 1) {
            // connection drops before any terminal event
            return new Response(ndjson([{ type: "progress", done: 1,
                                          total: 9 }]));
          }
          return new Response(ndjson([{ type: "finished" }]));
        },
        sleep: async (ms) => {
          slept.push(ms);
        },
        backoffMs: 100,
      },
    );
    await stream.run();
    expect(calls).toBe(2);
    expect(stream.reconnects).toBe(1);
    expect(slept).toEqual([100]);
  });

  it("backs off exponentially across repeated failures", async () => {
    let calls = 0;
    const slept: number[] = [];
    const stream = new EventStream("/events", () => undefined, {
      fetchImpl: async () => {
        calls += 1;
        if (calls < 4) return new Response("", { status: 503 });
        return new Response(ndjson([{ type: "halted" }]));
      },
      sleep: async (ms) => {
        slept.push(ms);
      },
      backoffMs: 100,
      maxBackoffMs: 350,
    });
    await stream.run();
    expect(slept).toEqual([100, 200, 350]);
  });

  it("stop() ends the loop without a terminal event", async () => {
    let calls = 0;
    const stream = new EventStream("/events", () => undefined, {
      fetchImpl: async () => {
        calls += 1;
        return new Response("", { status: 503 });
      },
      sleep: async () => {
        stream.stop();
      },
    });
    await stream.run();
    expect(calls).toBe(1);
  });
});
