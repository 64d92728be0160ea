"""Live steering: interrupt a running simulation and execute console commands.

Listeners (TCP, WebSocket, or a process signal) only raise a flag; at the
end of each timestep all workers agree collectively whether to open a
console.  The designated root reads lines from the session, assembles
complete commands, and broadcasts them; every worker executes the same
command between timesteps, so the simulation state stays consistent.

Wire protocol: plain UTF-8 lines with ">>> " / "... " prompts.  Structured
data travels in frames: ``##FRAME <content_type> <byte-count>\\n`` +
payload + ``##END\\n``; a telnet client sees frames as plain text lines.
"""

from __future__ import annotations

import base64
import codeop
import contextlib
import hashlib
import io
import signal
import socket
import struct
import threading
import traceback

from .comms import broadcast_line

PROMPT_FIRST = ">>> "
PROMPT_MORE = "... "
BANNER_FMT = "blockforge console | workers={workers} | step={step}"

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


class SteeringError(RuntimeError):
    pass


class CommandFrame:
    """A complete (possibly multi-line) command ready for broadcast."""

    def __init__(self, text, origin="session"):
        self.text = text
        self.origin = origin


def frame_reply(content_type: str, payload: bytes) -> bytes:
    """Frame structured data for the console wire."""
    header = f"##FRAME {content_type} {len(payload)}\n".encode("utf-8")
    return header + payload + b"##END\n"


def parse_frame(buf: bytes):
    """Inverse of frame_reply; returns (content_type, payload, remainder)."""
    if not buf.startswith(b"##FRAME "):
        raise SteeringError("not a data frame")
    newline = buf.index(b"\n")
    header = buf[8:newline].decode("utf-8").rsplit(" ", 1)
    content_type, count = header[0], int(header[1])
    start = newline + 1
    payload = buf[start:start + count]
    if len(payload) != count:
        raise SteeringError("truncated frame payload")
    rest = buf[start + count:]
    if not rest.startswith(b"##END\n"):
        raise SteeringError("missing frame terminator")
    return content_type, payload, rest[len(b"##END\n"):]


def needs_more_input(text: str) -> bool:
    """Completeness probe: the interpreter's own check, heuristic fallback."""
    try:
        return codeop.compile_command(text, "<console>", "single") is None
    except SyntaxError:
        # invalid but complete: dispatch so the error surfaces at execution
        return False
    except Exception:
        return _heuristic_needs_more(text)


def _heuristic_needs_more(text: str) -> bool:
    """Fallback: balanced brackets and no trailing continuation marker."""
    depth = 0
    for ch in text:
        if ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth -= 1
    last = text.rstrip("\n").rstrip()
    return depth > 0 or last.endswith("\\")


def assemble_command(readline, probe=needs_more_input, prompt=None):
    """Accumulate session lines until the probe reports a complete command.

    ``readline`` returns the next line (without newline) or None when the
    session closed; a session closing mid-command discards the partial frame
    and returns None.
    """
    lines = []
    while True:
        if prompt is not None:
            prompt(PROMPT_FIRST if not lines else PROMPT_MORE)
        line = readline()
        if line is None:
            return None
        lines.append(line)
        text = "\n".join(lines)
        if not probe(text):
            return CommandFrame(text)


# -- sessions -----------------------------------------------------------------

class SocketSession:
    """Line-oriented session over a TCP socket; CRLF tolerant, LF canonical."""

    def __init__(self, conn: socket.socket):
        self._conn = conn
        self._buf = b""
        self.closed = False

    def readline(self):
        while b"\n" not in self._buf:
            try:
                chunk = self._conn.recv(4096)
            except OSError:
                chunk = b""
            if not chunk:
                self.closed = True
                return None
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line.rstrip(b"\r").decode("utf-8", errors="replace")

    def send_text(self, text: str):
        if self.closed:
            return
        try:
            self._conn.sendall(text.encode("utf-8"))
        except OSError:
            self.closed = True

    def send_frame(self, content_type: str, payload: bytes):
        if self.closed:
            return
        try:
            self._conn.sendall(frame_reply(content_type, payload))
        except OSError:
            self.closed = True

    def close(self):
        self.closed = True
        try:
            self._conn.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._conn.close()


class WebSocketSession:
    """Session over an accepted WebSocket; one text message per line or frame."""

    def __init__(self, conn: socket.socket):
        self._conn = conn
        self.closed = False
        self._pending_lines = []

    def readline(self):
        while not self._pending_lines:
            msg = ws_recv_text(self._conn)
            if msg is None:
                self.closed = True
                return None
            self._pending_lines.extend(msg.split("\n") if msg else [""])
        return self._pending_lines.pop(0)

    def send_text(self, text: str):
        if self.closed:
            return
        try:
            ws_send_text(self._conn, text)
        except OSError:
            self.closed = True

    def send_frame(self, content_type: str, payload: bytes):
        if self.closed:
            return
        try:
            ws_send_text(self._conn, frame_reply(content_type, payload).decode("utf-8"))
        except OSError:
            self.closed = True

    def close(self):
        self.closed = True
        try:
            self._conn.sendall(bytes([0x88, 0]))  # close frame
        except OSError:
            pass
        self._conn.close()


class StdioSession:
    """Console on standard input/output (signal-triggered sessions)."""

    def __init__(self, stdin=None, stdout=None):
        import sys
        self._stdin = stdin or sys.stdin
        self._stdout = stdout or sys.stdout
        self.closed = False

    def readline(self):
        line = self._stdin.readline()
        if line == "":
            self.closed = True
            return None
        return line.rstrip("\n").rstrip("\r")

    def send_text(self, text):
        self._stdout.write(text)
        self._stdout.flush()

    def send_frame(self, content_type, payload):
        self._stdout.write(frame_reply(content_type, payload).decode("utf-8",
                                                                     errors="replace"))
        self._stdout.flush()

    def close(self):
        self.closed = True


# -- websocket plumbing ---------------------------------------------------------

def ws_handshake(conn: socket.socket, expected_path="/console") -> bool:
    """Server side of the RFC 6455 opening handshake."""
    data = b""
    while b"\r\n\r\n" not in data:
        chunk = conn.recv(4096)
        if not chunk:
            return False
        data += chunk
        if len(data) > 65536:
            return False
    request, _, _ = data.partition(b"\r\n\r\n")
    lines = request.decode("utf-8", errors="replace").split("\r\n")
    parts = lines[0].split(" ")
    if len(parts) < 2 or parts[0] != "GET" or parts[1].split("?")[0] != expected_path:
        conn.sendall(b"HTTP/1.1 404 Not Found\r\n\r\n")
        return False
    headers = {}
    for line in lines[1:]:
        if ":" in line:
            k, v = line.split(":", 1)
            headers[k.strip().lower()] = v.strip()
    key = headers.get("sec-websocket-key")
    if key is None:
        conn.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
        return False
    accept = base64.b64encode(
        hashlib.sha1((key + _WS_GUID).encode()).digest()).decode()
    conn.sendall(("HTTP/1.1 101 Switching Protocols\r\n"
                  "Upgrade: websocket\r\n"
                  "Connection: Upgrade\r\n"
                  f"Sec-WebSocket-Accept: {accept}\r\n\r\n").encode())
    return True


def _recv_exact(conn, n):
    buf = b""
    while len(buf) < n:
        chunk = conn.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def ws_recv_text(conn: socket.socket):
    """Next complete text message, transparently answering pings; None on close."""
    message = b""
    while True:
        head = _recv_exact(conn, 2)
        if head is None:
            return None
        fin = head[0] & 0x80
        opcode = head[0] & 0x0F
        masked = head[1] & 0x80
        length = head[1] & 0x7F
        if length == 126:
            length = struct.unpack(">H", _recv_exact(conn, 2))[0]
        elif length == 127:
            length = struct.unpack(">Q", _recv_exact(conn, 8))[0]
        mask = _recv_exact(conn, 4) if masked else b"\x00" * 4
        payload = _recv_exact(conn, length) if length else b""
        if payload is None:
            return None
        if masked:
            payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
        if opcode == 0x8:  # close
            return None
        if opcode == 0x9:  # ping -> pong
            conn.sendall(bytes([0x8A, len(payload)]) + payload)
            continue
        if opcode in (0x1, 0x2, 0x0):
            message += payload
            if fin:
                return message.decode("utf-8", errors="replace")


def ws_send_text(conn: socket.socket, text: str):
    payload = text.encode("utf-8")
    n = len(payload)
    if n < 126:
        header = bytes([0x81, n])
    elif n < 65536:
        header = bytes([0x81, 126]) + struct.pack(">H", n)
    else:
        header = bytes([0x81, 127]) + struct.pack(">Q", n)
    conn.sendall(header + payload)


# -- interrupt sources ----------------------------------------------------------

class SteeringState:
    """Interrupt flag plus at most one pending/active console session.

    Listener threads only stash a session; everything else happens inside the
    collective console between timesteps.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._pending = None
        self._active = False
        self._signal_flag = False
        self._listeners = []
        self._stop = threading.Event()
        self.tcp_port = None
        self.ws_port = None

    # listeners ---------------------------------------------------------

    def start_tcp(self, port=0):
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind(("127.0.0.1", port))
        server.listen(4)
        server.settimeout(0.2)
        self.tcp_port = server.getsockname()[1]
        t = threading.Thread(target=self._accept_loop,
                             args=(server, self._adopt_tcp), daemon=True)
        t.start()
        self._listeners.append((server, t))
        return self.tcp_port

    def start_websocket(self, port=0, path="/console"):
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind(("127.0.0.1", port))
        server.listen(4)
        server.settimeout(0.2)
        self.ws_port = server.getsockname()[1]

        def adopt(conn):
            if ws_handshake(conn, path):
                self._offer(WebSocketSession(conn))
            else:
                conn.close()

        t = threading.Thread(target=self._accept_loop, args=(server, adopt),
                             daemon=True)
        t.start()
        self._listeners.append((server, t))
        return self.ws_port

    def arm_signal(self, signum=None):
        """Use the platform's user signal as an interrupt source (when present)."""
        if signum is None:
            signum = getattr(signal, "SIGUSR1", None)
        if signum is None:
            return False
        signal.signal(signum, lambda *_: self.request_stdio_session())
        return True

    def request_stdio_session(self):
        with self._lock:
            self._signal_flag = True

    def _accept_loop(self, server, adopt):
        while not self._stop.is_set():
            try:
                conn, _ = server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            adopt(conn)

    def _adopt_tcp(self, conn):
        self._offer(SocketSession(conn))

    def _offer(self, session):
        with self._lock:
            if self._pending is not None or self._active:
                session.send_text("busy\n")
                session.close()
            else:
                self._pending = session

    # collective side -----------------------------------------------------

    def take_pending(self):
        with self._lock:
            if self._signal_flag:
                self._signal_flag = False
                self._active = True
                return StdioSession()
            session = self._pending
            self._pending = None
            if session is not None:
                self._active = True
            return session

    def has_pending(self):
        with self._lock:
            return self._pending is not None or self._signal_flag

    def session_done(self):
        with self._lock:
            self._active = False

    def shutdown(self):
        self._stop.set()
        for server, thread in self._listeners:
            try:
                server.close()
            except OSError:
                pass
            thread.join(timeout=1.0)
        self._listeners.clear()


def check_interrupt(steer, transport):
    """Collective: does a console session open before the next timestep?

    The root's pending flag is broadcast so every worker takes the same
    branch.  Returns the session on the root (or None), True/False elsewhere.
    """
    if steer is None:
        return None if transport.is_root else False
    flag = "1" if (transport.is_root and steer.has_pending()) else "0"
    flag = broadcast_line(flag, transport)
    if flag != "1":
        return None if transport.is_root else False
    return steer.take_pending() if transport.is_root else True


# -- console execution ----------------------------------------------------------

RESUME = "resume"
SHUTDOWN = "shutdown"


def execute_broadcast(frame_text, transport, namespace):
    """Broadcast one command and execute it on every worker.

    Returns (root output text, control verb).  Script errors are reported to
    the session; the simulation state is left as the command made it.
    """
    text = broadcast_line(frame_text, transport)
    ctl = namespace.setdefault("__console_ctl__", {})
    ctl.pop("verb", None)
    out = io.StringIO()
    try:
        try:
            code = compile(text, "<console>", "single")
        except SyntaxError:
            code = compile(text, "<console>", "exec")
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(out):
            exec(code, namespace)  # noqa: S102 - operator-supplied command
    except _ConsoleSignal as sig:
        ctl["verb"] = sig.verb
    except BaseException:
        out.write(traceback.format_exc())
    return out.getvalue(), ctl.get("verb")


class _ConsoleSignal(BaseException):
    def __init__(self, verb):
        super().__init__(verb)
        self.verb = verb


def make_console_namespace(base):
    """Console globals: the base exposures plus resume()/shutdown() built-ins."""
    namespace = dict(base)

    def resume():
        raise _ConsoleSignal(RESUME)

    def shutdown():
        raise _ConsoleSignal(SHUTDOWN)

    namespace["resume"] = resume
    namespace["shutdown"] = shutdown
    namespace["__console_ctl__"] = {}
    return namespace


def run_console(session, transport, namespace, step, steer=None):
    """Interactive loop between timesteps; returns 'resume' or 'shutdown'.

    Only the root talks to the session; every command is broadcast and
    executed on all workers in the same order.
    """
    is_root = transport.is_root
    if is_root and session is not None:
        session.send_text(BANNER_FMT.format(workers=transport.worker_count,
                                            step=step) + "\n")
    verb = RESUME
    while True:
        if is_root:
            frame = assemble_command(session.readline,
                                     prompt=lambda p: session.send_text(p))
            text = frame.text if frame is not None else "resume()"
        else:
            text = None
        output, control = execute_broadcast(text if is_root else "", transport,
                                            namespace)
        if is_root and output:
            session.send_text(output if output.endswith("\n") else output + "\n")
        if control in (RESUME, SHUTDOWN):
            verb = control
            break
    if is_root:
        if session is not None:
            if verb == RESUME:
                session.send_text("simulation resumed\n")
            else:
                session.send_text("simulation shut down\n")
            session.close()
        if steer is not None:
            steer.session_done()
    return verb
