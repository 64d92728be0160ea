import { describe, expect, it } from "vitest";

import { classifyMessage, parseFrame, parseMetricPayload,
         parseSlicePayload } from "../src/protocol.js";

describe("parseFrame", () => {
  it("parses a well-formed slice frame", () => {
    const payload = JSON.stringify({ name: "velocity", axis: "z", coarsen: 4,
                                     values: [0, 1, 2] });
    const bytes = new TextEncoder().encode(payload).length;
    const message = `##FRAME slice/json ${bytes}\n${payload}##END\n`;
    const frame = parseFrame(message);
    expect(frame).not.toBeNull();
    expect(frame!.contentType).toBe("slice/json");
    expect(frame!.payload).toBe(payload);
  });

  it("handles an empty payload", () => {
    const frame = parseFrame("##FRAME metric/json 0\n##END\n");
    expect(frame).not.toBeNull();
    expect(frame!.payload).toBe("");
  });

  it("counts payload length in bytes, not code units", () => {
    const payload = "éé"; // two 2-byte characters
    const message = `##FRAME x/y 4\n${payload}##END\n`;
    expect(parseFrame(message)!.payload).toBe(payload);
  });

  it("rejects a truncated frame", () => {
    expect(parseFrame("##FRAME slice/json 100\nshort##END\n")).toBeNull();
  });

  it("rejects a missing terminator", () => {
    expect(parseFrame("##FRAME slice/json 2\nab")).toBeNull();
  });

  it("rejects plain text", () => {
    expect(parseFrame("hello world")).toBeNull();
  });
});

describe("classifyMessage", () => {
  it("recognizes both prompts", () => {
    expect(classifyMessage(">>> ")).toEqual({ kind: "prompt", prompt: ">>> " });
    expect(classifyMessage("... ")).toEqual({ kind: "prompt", prompt: "... " });
  });

  it("falls back to raw text for malformed frames", () => {
    const event = classifyMessage("##FRAME broken");
    expect(event.kind).toBe("text");
  });

  it("passes banner lines through as text", () => {
    const event = classifyMessage("blockforge console | workers=2 | step=17\n");
    expect(event.kind).toBe("text");
  });
});

describe("payload parsing", () => {
  it("accepts a 1D slice payload", () => {
    const slice = parseSlicePayload(
      '{"name":"velocity","axis":"z","coarsen":4,"values":[1,2,3]}');
    expect(slice!.values).toEqual([1, 2, 3]);
  });

  it("rejects junk slice payloads", () => {
    expect(parseSlicePayload("not json")).toBeNull();
    expect(parseSlicePayload('{"name":1}')).toBeNull();
  });

  it("accepts metric payloads and defaults the step", () => {
    const metric = parseMetricPayload('{"name":"Max X Vel","value":0.03}');
    expect(metric).toEqual({ name: "Max X Vel", step: 0, value: 0.03 });
  });

  it("rejects junk metric payloads", () => {
    expect(parseMetricPayload('{"value":"x"}')).toBeNull();
  });
});
