import type { ModelInfo, RunStats } from "./types.js";

export interface StatsRow {
  label: string;
  value: string;
}

/** Human-readable rows for whichever stats shape the run's task produced. */
export function formatStats(
  stats: RunStats,
  model?: ModelInfo,
): StatsRow[] {
  const rows: StatsRow[] = [{ label: "state", value: stats.state }];
  if (stats.histogram !== undefined) {
    const total = Object.values(stats.histogram)
      .reduce((a, b) => a + b, 0);
    for (const [cls, count] of Object.entries(stats.histogram)) {
      const name = model?.class_names[Number(cls)] ?? `class ${cls}`;
      const pct = total > 0 ? ((100 * count) / total).toFixed(1) : "0.0";
      rows.push({ label: name, value: `${count} patches (${pct}%)` });
    }
    rows.push({
      label: "slide-level call",
      value: stats.slide_level_class ?? "none",
    });
  }
  if (stats.pixel_counts !== undefined) {
    for (const [cls, count] of Object.entries(stats.pixel_counts)) {
      const name = model?.class_names[Number(cls)] ?? `class ${cls}`;
      rows.push({ label: name, value: `${count} px` });
    }
    rows.push({
      label: "unprocessed",
      value: `${stats.unprocessed_pixels ?? 0} px`,
    });
  }
  if (stats.detection_counts !== undefined) {
    const entries = Object.entries(stats.detection_counts);
    if (entries.length === 0) {
      rows.push({ label: "detections", value: "0" });
    }
    for (const [cls, count] of entries) {
      const name = model?.class_names[Number(cls)] ?? `class ${cls}`;
      rows.push({ label: name, value: `${count} detections` });
    }
  }
  return rows;
}
