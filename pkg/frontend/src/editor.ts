import { ApiError, type ApiClient } from "./api.js";
import type { PipelineInfo } from "./types.js";

export const STAGE_KINDS = new Set([
  "tissue_segmentation",
  "patch_generator",
  "batch_generator",
  "neural_network",
  "stitcher",
  "accumulator",
]);

export type TokenKind =
  | "keyword"
  | "stage-kind"
  | "name"
  | "attr-key"
  | "value"
  | "comment"
  | "plain";

export interface Token {
  line: number;
  start: number;
  text: string;
  kind: TokenKind;
}

/** Minimal keyword tokenizer for script highlighting. */
export function tokenize(text: string): Token[] {
  const tokens: Token[] = [];
  const lines = text.split("\n");
  for (let i = 0; i < lines.length; i += 1) {
    const line = lines[i];
    const lineNo = i + 1;
    const trimmed = line.trim();
    if (trimmed.startsWith("#")) {
      tokens.push({ line: lineNo, start: line.indexOf("#"),
                    text: trimmed, kind: "comment" });
      continue;
    }
    const pattern = /\S+/g;
    let match: RegExpExecArray | null;
    let index = 0;
    let firstWord = "";
    while ((match = pattern.exec(line)) !== null) {
      const word = match[0];
      let kind: TokenKind = "plain";
      if (index === 0) {
        firstWord = word;
        kind = word === "stage" || word === "attr" ? "keyword" : "plain";
      } else if (firstWord === "stage") {
        kind = index === 1 ? "name"
          : STAGE_KINDS.has(word) ? "stage-kind" : "plain";
      } else if (firstWord === "attr") {
        kind = index === 1 ? "attr-key" : "value";
      }
      tokens.push({ line: lineNo, start: match.index, text: word, kind });
      index += 1;
    }
  }
  return tokens;
}

export interface SaveFailure {
  message: string;
  /** 1-based line from the server's parse error, if it names one. */
  line?: number;
}

export type SaveResult =
  | { ok: true; pipeline: PipelineInfo }
  | { ok: false; failure: SaveFailure };

export function errorLine(message: string): number | undefined {
  const match = /line (\d+)/.exec(message);
  return match ? Number(match[1]) : undefined;
}

/** Validate locally, then save server-side; parse errors carry a line. */
export async function savePipeline(
  api: ApiClient,
  name: string,
  text: string,
): Promise<SaveResult> {
  if (text.trim().length === 0) {
    return { ok: false, failure: { message: "pipeline script is empty" } };
  }
  try {
    const pipeline = await api.savePipeline(name, text);
    return { ok: true, pipeline };
  } catch (err) {
    if (err instanceof ApiError) {
      return {
        ok: false,
        failure: { message: err.message, line: errorLine(err.message) },
      };
    }
    throw err;
  }
}
