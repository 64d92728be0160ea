// Console wire protocol: plain UTF-8 lines plus ##FRAME data frames.
// The server sends one WebSocket text message per line or per frame.

export interface TextEvent {
  kind: "text";
  text: string;
}

export interface PromptEvent {
  kind: "prompt";
  prompt: string; // ">>> " or "... "
}

export interface FrameEvent {
  kind: "frame";
  contentType: string;
  payload: string;
}

export type ConsoleEvent = TextEvent | PromptEvent | FrameEvent;

export interface SlicePayload {
  name: string;
  axis: "x" | "y" | "z";
  coarsen: number;
  values: number[] | number[][];
}

export interface MetricPayload {
  name: string;
  step: number;
  value: number;
}

const FRAME_HEAD = "##FRAME ";
const FRAME_TAIL = "##END\n";

/**
 * Parse one framed message: "##FRAME <type> <byte-count>\n" + payload + "##END\n".
 * Returns null when the message is not a well-formed frame; the caller then
 * falls back to raw text so a malformed frame never kills the session.
 */
export function parseFrame(message: string): FrameEvent | null {
  if (!message.startsWith(FRAME_HEAD)) {
    return null;
  }
  const headerEnd = message.indexOf("\n");
  if (headerEnd < 0) {
    return null;
  }
  const header = message.slice(FRAME_HEAD.length, headerEnd);
  const sep = header.lastIndexOf(" ");
  if (sep < 0) {
    return null;
  }
  const contentType = header.slice(0, sep);
  const count = Number(header.slice(sep + 1));
  if (!Number.isInteger(count) || count < 0) {
    return null;
  }
  const body = message.slice(headerEnd + 1);
  const bytes = new TextEncoder().encode(body);
  const tail = new TextDecoder().decode(bytes.slice(count));
  if (tail !== FRAME_TAIL) {
    return null;
  }
  const payload = new TextDecoder().decode(bytes.slice(0, count));
  return { kind: "frame", contentType, payload };
}

/** Classify one incoming message as prompt, frame, or plain text. */
export function classifyMessage(message: string): ConsoleEvent {
  if (message === ">>> " || message === "... ") {
    return { kind: "prompt", prompt: message };
  }
  const frame = parseFrame(message);
  if (frame !== null) {
    return frame;
  }
  return { kind: "text", text: message };
}

export function parseSlicePayload(payload: string): SlicePayload | null {
  try {
    const data = JSON.parse(payload);
    if (typeof data.name !== "string" || !Array.isArray(data.values)) {
      return null;
    }
    return data as SlicePayload;
  } catch {
    return null;
  }
}

export function parseMetricPayload(payload: string): MetricPayload | null {
  try {
    const data = JSON.parse(payload);
    if (typeof data.name !== "string" || typeof data.value !== "number") {
      return null;
    }
    return { name: data.name, step: Number(data.step ?? 0), value: data.value };
  } catch {
    return null;
  }
}
