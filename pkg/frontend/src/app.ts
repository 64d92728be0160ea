// DOM wiring: transcript, command input with history, charts.

import { drawHeatmap, drawLineChart, drawMetricSeries, MetricSeries,
         sliceChartModel } from "./charts.js";
import { ConsoleEvent, parseMetricPayload, parseSlicePayload } from "./protocol.js";
import { Session, SocketLike } from "./session.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const transcriptEl = el<HTMLPreElement>("transcript");
const inputEl = el<HTMLInputElement>("command");
const statusEl = el<HTMLSpanElement>("status");
const urlEl = el<HTMLInputElement>("url");
const connectBtn = el<HTMLButtonElement>("connect");
const sliceCanvas = el<HTMLCanvasElement>("slice-chart");
const metricCanvas = el<HTMLCanvasElement>("metric-chart");

const metrics = new MetricSeries();
let session: Session | null = null;

function appendTranscript(prefix: string, text: string): void {
  transcriptEl.textContent += `${prefix}${text}\n`;
  transcriptEl.scrollTop = transcriptEl.scrollHeight;
}

function handleEvent(event: ConsoleEvent): void {
  if (event.kind === "prompt") {
    inputEl.placeholder = event.prompt;
    return;
  }
  if (event.kind === "text") {
    appendTranscript("", event.text);
    if (event.text.includes("simulation resumed")) {
      appendTranscript("", "[session ended]");
    }
    return;
  }
  if (event.contentType === "slice/json") {
    const slice = parseSlicePayload(event.payload);
    if (slice === null) {
      appendTranscript("", event.payload);
      return;
    }
    const model = sliceChartModel(slice);
    if (model.kind === "line") {
      drawLineChart(sliceCanvas, model);
    } else {
      drawHeatmap(sliceCanvas, model);
    }
    appendTranscript("", `[slice ${slice.name}: ${model.kind}]`);
    return;
  }
  if (event.contentType === "metric/json") {
    const metric = parseMetricPayload(event.payload);
    if (metric === null) {
      appendTranscript("", event.payload);
      return;
    }
    metrics.append(metric);
    drawMetricSeries(metricCanvas, metrics);
    return;
  }
  appendTranscript("", `[${event.contentType}] ${event.payload}`);
}

function webSocketFactory(url: string): SocketLike {
  const ws = new WebSocket(url);
  const adapter: SocketLike = {
    send: (data) => ws.send(data),
    close: () => ws.close(),
    onmessage: null,
    onopen: null,
    onclose: null,
  };
  ws.onmessage = (ev) => adapter.onmessage?.(String(ev.data));
  ws.onopen = () => adapter.onopen?.();
  ws.onclose = () => adapter.onclose?.();
  return adapter;
}

connectBtn.addEventListener("click", () => {
  if (session !== null && session.status === "connected") {
    session.disconnect();
  }
  session = new Session(urlEl.value, {
    onEvent: handleEvent,
    onStatus: (status) => {
      statusEl.textContent = status;
      statusEl.className = `status-${status}`;
    },
  });
  transcriptEl.textContent = "";
  session.connect(webSocketFactory);
});

inputEl.addEventListener("keydown", (ev) => {
  if (session === null) return;
  if (ev.key === "Enter") {
    const text = inputEl.value;
    appendTranscript(inputEl.placeholder || ">>> ", text);
    session.sendCommand(text);
    inputEl.value = "";
  } else if (ev.key === "ArrowUp") {
    inputEl.value = session.recall(true);
    ev.preventDefault();
  } else if (ev.key === "ArrowDown") {
    inputEl.value = session.recall(false);
    ev.preventDefault();
  }
});
