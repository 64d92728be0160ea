// Chart models and canvas rendering for slice frames and metric series.
// Model building is pure: the same frames always produce the same data.

import { MetricPayload, SlicePayload } from "./protocol.js";

export interface LineChartModel {
  kind: "line";
  title: string;
  points: number[];
  min: number;
  max: number;
}

export interface HeatmapModel {
  kind: "heatmap";
  title: string;
  rows: number[][];
  min: number;
  max: number;
}

export type SliceChartModel = LineChartModel | HeatmapModel;

export function sliceChartModel(slice: SlicePayload): SliceChartModel {
  const title = `${slice.name} along ${slice.axis} (coarsen=${slice.coarsen})`;
  if (slice.values.length > 0 && Array.isArray(slice.values[0])) {
    const rows = slice.values as number[][];
    const flat = rows.flat();
    return {
      kind: "heatmap",
      title,
      rows,
      min: Math.min(...flat),
      max: Math.max(...flat),
    };
  }
  const points = slice.values as number[];
  return {
    kind: "line",
    title,
    points,
    min: Math.min(...points),
    max: Math.max(...points),
  };
}

/** Per-name metric time series, appended in arrival order. */
export class MetricSeries {
  readonly series = new Map<string, { steps: number[]; values: number[] }>();

  append(metric: MetricPayload): void {
    let entry = this.series.get(metric.name);
    if (entry === undefined) {
      entry = { steps: [], values: [] };
      this.series.set(metric.name, entry);
    }
    entry.steps.push(metric.step);
    entry.values.push(metric.value);
  }
}

function heatColor(t: number): string {
  // dark blue -> cyan -> yellow ramp
  const r = Math.round(255 * Math.min(1, Math.max(0, 2 * t - 1)));
  const g = Math.round(255 * Math.min(1, Math.max(0, 1.6 * t)));
  const b = Math.round(255 * Math.min(1, Math.max(0.2, 1 - t)));
  return `rgb(${r},${g},${b})`;
}

export function drawLineChart(canvas: HTMLCanvasElement, model: LineChartModel): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const { width, height } = canvas;
  ctx.clearRect(0, 0, width, height);
  ctx.fillStyle = "#111";
  ctx.fillRect(0, 0, width, height);
  const pad = 28;
  const span = model.max - model.min || 1;
  ctx.strokeStyle = "#4fc3f7";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  model.points.forEach((v, i) => {
    const x = pad + (i / Math.max(1, model.points.length - 1)) * (width - 2 * pad);
    const y = height - pad - ((v - model.min) / span) * (height - 2 * pad);
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.stroke();
  ctx.fillStyle = "#ccc";
  ctx.font = "11px monospace";
  ctx.fillText(model.title, pad, 14);
  ctx.fillText(`min=${model.min.toPrecision(4)} max=${model.max.toPrecision(4)}`,
    pad, height - 8);
}

export function drawHeatmap(canvas: HTMLCanvasElement, model: HeatmapModel): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const { width, height } = canvas;
  ctx.clearRect(0, 0, width, height);
  const pad = 24;
  const nr = model.rows.length;
  const nc = model.rows[0]?.length ?? 0;
  const span = model.max - model.min || 1;
  const cw = (width - 2 * pad) / Math.max(1, nc);
  const ch = (height - 2 * pad) / Math.max(1, nr);
  for (let i = 0; i < nr; i++) {
    for (let j = 0; j < nc; j++) {
      ctx.fillStyle = heatColor((model.rows[i][j] - model.min) / span);
      ctx.fillRect(pad + j * cw, pad + i * ch, Math.ceil(cw), Math.ceil(ch));
    }
  }
  ctx.fillStyle = "#ccc";
  ctx.font = "11px monospace";
  ctx.fillText(model.title, pad, 14);
  ctx.fillText(`min=${model.min.toPrecision(4)} max=${model.max.toPrecision(4)}`,
    pad, height - 6);
}

export function drawMetricSeries(canvas: HTMLCanvasElement, metrics: MetricSeries): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const { width, height } = canvas;
  ctx.clearRect(0, 0, width, height);
  ctx.fillStyle = "#111";
  ctx.fillRect(0, 0, width, height);
  const palette = ["#4fc3f7", "#ffb74d", "#aed581", "#f06292", "#ba68c8"];
  let idx = 0;
  const pad = 28;
  ctx.font = "11px monospace";
  for (const [name, entry] of metrics.series) {
    const color = palette[idx % palette.length];
    const min = Math.min(...entry.values);
    const max = Math.max(...entry.values);
    const span = max - min || 1;
    ctx.strokeStyle = color;
    ctx.beginPath();
    entry.values.forEach((v, i) => {
      const x = pad + (i / Math.max(1, entry.values.length - 1)) * (width - 2 * pad);
      const y = height - pad - ((v - min) / span) * (height - 2 * pad);
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.stroke();
    ctx.fillStyle = color;
    ctx.fillText(name, pad + idx * 120, 14);
    idx += 1;
  }
}
