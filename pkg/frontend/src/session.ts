// Session state machine over the console WebSocket.
// The socket is injected so tests can drive the session with a fake.

import { classifyMessage, ConsoleEvent } from "./protocol.js";

export type SessionStatus = "disconnected" | "connecting" | "connected" | "busy";

export interface TranscriptEntry {
  direction: "in" | "out";
  text: string;
}

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onmessage: ((data: string) => void) | null;
  onopen: (() => void) | null;
  onclose: (() => void) | null;
}

export interface SessionHooks {
  onEvent?: (event: ConsoleEvent) => void;
  onStatus?: (status: SessionStatus) => void;
}

export class Session {
  url: string;
  status: SessionStatus = "disconnected";
  transcript: TranscriptEntry[] = [];
  prompt = "";
  history: string[] = [];
  private historyPos = -1;
  private socket: SocketLike | null = null;
  private hooks: SessionHooks;

  constructor(url: string, hooks: SessionHooks = {}) {
    this.url = url;
    this.hooks = hooks;
  }

  connect(factory: (url: string) => SocketLike): void {
    if (this.socket !== null) {
      return; // at most one live session
    }
    this.setStatus("connecting");
    const socket = factory(this.url);
    this.socket = socket;
    socket.onopen = () => this.setStatus("connected");
    socket.onclose = () => {
      this.socket = null;
      if (this.status !== "busy") {
        this.setStatus("disconnected");
      }
    };
    socket.onmessage = (data) => this.receive(data);
  }

  disconnect(): void {
    this.socket?.close();
    this.socket = null;
    this.setStatus("disconnected");
  }

  /** Send a command; multi-line blocks go out one line per message. */
  sendCommand(text: string): void {
    if (this.socket === null || this.status !== "connected") {
      this.transcript.push({ direction: "in", text: "[not connected]" });
      this.hooks.onEvent?.({ kind: "text", text: "[not connected]" });
      return;
    }
    for (const line of text.split("\n")) {
      this.socket.send(line);
      this.transcript.push({ direction: "out", text: line });
    }
    if (text.trim().length > 0) {
      this.history.push(text);
    }
    this.historyPos = -1;
  }

  /** Command history navigation: negative steps go back in time. */
  recall(stepBack: boolean): string {
    if (this.history.length === 0) {
      return "";
    }
    if (stepBack) {
      this.historyPos = this.historyPos < 0
        ? this.history.length - 1
        : Math.max(0, this.historyPos - 1);
    } else if (this.historyPos >= 0) {
      this.historyPos += 1;
      if (this.historyPos >= this.history.length) {
        this.historyPos = -1;
        return "";
      }
    }
    return this.historyPos >= 0 ? this.history[this.historyPos] : "";
  }

  private receive(message: string): void {
    if (message.trim() === "busy") {
      this.setStatus("busy");
      this.transcript.push({ direction: "in", text: "busy" });
      this.hooks.onEvent?.({ kind: "text", text: "busy" });
      return;
    }
    const event = classifyMessage(message);
    if (event.kind === "prompt") {
      this.prompt = event.prompt;
    } else if (event.kind === "text") {
      this.transcript.push({ direction: "in", text: event.text });
    } else {
      this.transcript.push({
        direction: "in",
        text: `[frame ${event.contentType}]`,
      });
    }
    this.hooks.onEvent?.(event);
  }

  private setStatus(status: SessionStatus): void {
    this.status = status;
    this.hooks.onStatus?.(status);
  }
}
