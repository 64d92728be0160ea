// Minimal WebSocket client over node:net, adapting to the SocketLike
// interface so integration tests can drive the real Session against a live
// server (node 20 ships no global WebSocket).

import * as crypto from "node:crypto";
import * as net from "node:net";

import { SocketLike } from "../src/session.js";

const GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";

export function nodeWsConnect(url: string): SocketLike {
  const parsed = new URL(url);
  const port = Number(parsed.port || 80);
  const adapter: SocketLike = {
    send: () => { throw new Error("not connected"); },
    close: () => undefined,
    onmessage: null,
    onopen: null,
    onclose: null,
  };

  const sock = net.connect(port, parsed.hostname);
  const key = crypto.randomBytes(16).toString("base64");
  let buffer = Buffer.alloc(0);
  let handshaken = false;

  sock.on("connect", () => {
    sock.write(`GET ${parsed.pathname} HTTP/1.1\r\n`
      + `Host: ${parsed.hostname}:${port}\r\n`
      + "Upgrade: websocket\r\nConnection: Upgrade\r\n"
      + `Sec-WebSocket-Key: ${key}\r\n`
      + "Sec-WebSocket-Version: 13\r\n\r\n");
  });

  function sendText(text: string): void {
    const payload = Buffer.from(text, "utf-8");
    const mask = crypto.randomBytes(4);
    const masked = Buffer.from(payload.map((b, i) => b ^ mask[i % 4]));
    let header: Buffer;
    if (payload.length < 126) {
      header = Buffer.from([0x81, 0x80 | payload.length]);
    } else if (payload.length < 65536) {
      header = Buffer.alloc(4);
      header[0] = 0x81;
      header[1] = 0x80 | 126;
      header.writeUInt16BE(payload.length, 2);
    } else {
      header = Buffer.alloc(10);
      header[0] = 0x81;
      header[1] = 0x80 | 127;
      header.writeBigUInt64BE(BigInt(payload.length), 2);
    }
    sock.write(Buffer.concat([header, mask, masked]));
  }

  function drainFrames(): void {
    for (;;) {
      if (buffer.length < 2) return;
      const opcode = buffer[0] & 0x0f;
      let length = buffer[1] & 0x7f;
      let offset = 2;
      if (length === 126) {
        if (buffer.length < 4) return;
        length = buffer.readUInt16BE(2);
        offset = 4;
      } else if (length === 127) {
        if (buffer.length < 10) return;
        length = Number(buffer.readBigUInt64BE(2));
        offset = 10;
      }
      if (buffer.length < offset + length) return;
      const payload = buffer.subarray(offset, offset + length);
      buffer = buffer.subarray(offset + length);
      if (opcode === 0x8) {
        sock.end();
        return;
      }
      if (opcode === 0x9) {
        sock.write(Buffer.concat([Buffer.from([0x8a, payload.length]), payload]));
        continue;
      }
      if (opcode === 0x1) {
        adapter.onmessage?.(payload.toString("utf-8"));
      }
    }
  }

  sock.on("data", (chunk) => {
    buffer = Buffer.concat([buffer, chunk]);
    if (!handshaken) {
      const end = buffer.indexOf("\r\n\r\n");
      if (end < 0) return;
      const headers = buffer.subarray(0, end).toString();
      buffer = buffer.subarray(end + 4);
      const accept = crypto.createHash("sha1").update(key + GUID).digest("base64");
      if (!headers.includes("101") || !headers.includes(accept)) {
        sock.destroy();
        adapter.onclose?.();
        return;
      }
      handshaken = true;
      adapter.send = sendText;
      adapter.close = () => {
        try {
          sock.write(Buffer.from([0x88, 0x80, 0, 0, 0, 0]));
        } catch {
          // already gone
        }
        sock.end();
      };
      adapter.onopen?.();
    }
    if (handshaken) {
      drainFrames();
    }
  });

  sock.on("close", () => adapter.onclose?.());
  sock.on("error", () => adapter.onclose?.());
  return adapter;
}
