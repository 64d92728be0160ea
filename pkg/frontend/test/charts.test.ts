import { describe, expect, it } from "vitest";

import { MetricSeries, sliceChartModel } from "../src/charts.js";
import { parseSlicePayload } from "../src/protocol.js";

describe("sliceChartModel", () => {
  it("builds a line chart with the frame's point count", () => {
    const values = Array.from({ length: 25 }, (_, i) => Math.sin(i / 4));
    const model = sliceChartModel({ name: "velocity", axis: "z", coarsen: 4, values });
    expect(model.kind).toBe("line");
    if (model.kind === "line") {
      expect(model.points.length).toBe(25);
      expect(model.min).toBeCloseTo(Math.min(...values), 12);
      expect(model.max).toBeCloseTo(Math.max(...values), 12);
    }
  });

  it("flat slice has min equal to max", () => {
    const model = sliceChartModel({ name: "fill", axis: "x", coarsen: 1,
                                    values: [0.5, 0.5, 0.5] });
    if (model.kind === "line") {
      expect(model.min).toBe(model.max);
    }
  });

  it("nested values become a heatmap", () => {
    const model = sliceChartModel({
      name: "density", axis: "y", coarsen: 1,
      values: [[1, 2], [3, 4]],
    });
    expect(model.kind).toBe("heatmap");
    if (model.kind === "heatmap") {
      expect(model.rows.length).toBe(2);
      expect(model.min).toBe(1);
      expect(model.max).toBe(4);
    }
  });

  it("is pure: identical frames produce identical models", () => {
    const payload = '{"name":"velocity","axis":"z","coarsen":4,"values":[3,1,2]}';
    const a = sliceChartModel(parseSlicePayload(payload)!);
    const b = sliceChartModel(parseSlicePayload(payload)!);
    expect(a).toEqual(b);
  });
});

describe("MetricSeries", () => {
  it("appends per-name series in arrival order", () => {
    const metrics = new MetricSeries();
    metrics.append({ name: "Max X Vel", step: 1, value: 0.01 });
    metrics.append({ name: "Max X Vel", step: 2, value: 0.02 });
    metrics.append({ name: "mass", step: 1, value: 5.0 });
    expect(metrics.series.get("Max X Vel")).toEqual({
      steps: [1, 2], values: [0.01, 0.02],
    });
    expect(metrics.series.get("mass")!.values).toEqual([5.0]);
  });
});
