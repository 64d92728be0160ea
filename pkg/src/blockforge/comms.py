"""Worker transport and the collective patterns built on it.

Workers are threads with ordered point-to-point byte channels.  Everything
above that (ghost-layer exchange, reductions, slice gather, command
broadcast) only assumes the transport contract: per-pair in-order delivery
and an identical collective call sequence on every worker.
"""

from __future__ import annotations

import queue
import struct
import threading

import numpy as np

from .blockgrid import BlockStorage

MIN = "MIN"
MAX = "MAX"
SUM = "SUM"

_HEADER = struct.Struct("<QQ")  # tag, payload length (little-endian u64)

# fixed tags for collectives; pairwise ordering disambiguates repeats
TAG_REDUCE = 1
TAG_BCAST = 2
TAG_GATHER = 3
TAG_BARRIER = 4


class TransportError(RuntimeError):
    pass


def encode_message(tag: int, payload: bytes) -> bytes:
    return _HEADER.pack(tag, len(payload)) + payload


def decode_message(buf: bytes):
    tag, length = _HEADER.unpack_from(buf)
    payload = buf[_HEADER.size:]
    if len(payload) != length:
        raise TransportError(f"framing error: expected {length} payload bytes, got {len(payload)}")
    return tag, payload


def message_tag(block_id: int, axis: int, direction: int, field_name: str) -> int:
    """Deterministic 64-bit message tag (FNV-1a over the routing tuple)."""
    h = 0xCBF29CE484222325
    for b in f"{block_id}|{axis}|{direction}|{field_name}".encode():
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h | 0x100  # keep clear of the small collective tags


class _Hub:
    """State shared by all workers of one run."""

    def __init__(self, n):
        self.n = n
        self.queues = {(s, d): queue.SimpleQueue() for s in range(n) for d in range(n)}
        self.barrier = threading.Barrier(n)
        self.failure = None
        self._lock = threading.Lock()

    def fail(self, exc):
        with self._lock:
            if self.failure is None:
                self.failure = exc
        self.barrier.abort()


class Transport:
    """One worker's endpoint: ordered send/recv plus barrier."""

    def __init__(self, hub: _Hub, self_id: int):
        self._hub = hub
        self.worker_count = hub.n
        self.self_id = self_id
        self._stash = {}  # (src, tag) -> deque of payloads received early

    @property
    def is_root(self):
        return self.self_id == 0

    def send(self, dst: int, tag: int, payload: bytes):
        self._hub.queues[(self.self_id, dst)].put(encode_message(tag, payload))

    def recv(self, src: int, tag: int) -> bytes:
        """Next message with this tag from src.

        Messages of one sender arrive in send order; differently-tagged
        messages read in a different order are stashed, so peers may batch
        their sends in any deterministic order.
        """
        stashed = self._stash.get((src, tag))
        if stashed:
            return stashed.pop(0)
        q = self._hub.queues[(src, self.self_id)]
        while True:
            try:
                buf = q.get(timeout=0.2)
            except queue.Empty:
                if self._hub.failure is not None:
                    raise TransportError("peer worker failed") from self._hub.failure
                continue
            got_tag, payload = decode_message(buf)
            if got_tag == tag:
                return payload
            self._stash.setdefault((src, got_tag), []).append(payload)

    def barrier(self):
        try:
            self._hub.barrier.wait()
        except threading.BrokenBarrierError:
            raise TransportError("barrier broken by failed worker") from self._hub.failure


def run_workers(worker_count, fn, *args, **kwargs):
    """Run ``fn(transport, *args, **kwargs)`` on every worker; return results by id."""
    hub = _Hub(worker_count)
    results = [None] * worker_count

    def _main(wid):
        try:
            results[wid] = fn(Transport(hub, wid), *args, **kwargs)
        except BaseException as exc:  # noqa: BLE001 - propagated below
            hub.fail(exc)

    if worker_count == 1:
        _main(0)
    else:
        threads = [threading.Thread(target=_main, args=(wid,), name=f"worker-{wid}")
                   for wid in range(worker_count)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if hub.failure is not None:
        raise hub.failure
    return results


def serial_transport():
    """Single-worker transport for direct (non-spawned) use in tests and tools."""
    return Transport(_Hub(1), 0)


# -- collectives -------------------------------------------------------------

def broadcast_bytes(payload, transport: Transport, root=0) -> bytes:
    if transport.self_id == root:
        for dst in range(transport.worker_count):
            if dst != root:
                transport.send(dst, TAG_BCAST, payload)
        return payload
    return transport.recv(root, TAG_BCAST)


def broadcast_line(text, transport: Transport, root=0) -> str:
    """Root's text, byte-identical on every worker."""
    data = text.encode("utf-8") if transport.self_id == root else None
    return broadcast_bytes(data, transport, root).decode("utf-8")


_REDUCE_FOLDS = {
    MIN: min,
    MAX: max,
    SUM: lambda a, b: a + b,
}


def reduce_scalar(value, op, transport: Transport, root=0):
    """Fold one float per worker onto the root; ``None`` elsewhere.

    The fold runs in ascending worker order, so the result is independent of
    thread scheduling.
    """
    if op not in _REDUCE_FOLDS:
        raise TransportError(f"unknown reduce op {op!r}")
    payload = op.encode() + b"\x00" + struct.pack("<d", float(value))
    if transport.self_id != root:
        transport.send(root, TAG_REDUCE, payload)
        return None
    contributions = {}
    for src in range(transport.worker_count):
        if src == root:
            contributions[src] = float(value)
            continue
        raw = transport.recv(src, TAG_REDUCE)
        their_op, packed = raw.split(b"\x00", 1)
        if their_op.decode() != op:
            raise TransportError(
                f"reduce op mismatch: root uses {op}, worker {src} sent {their_op.decode()}")
        contributions[src] = struct.unpack("<d", packed)[0]
    fold = _REDUCE_FOLDS[op]
    acc = contributions[0]
    for src in range(1, transport.worker_count):
        acc = fold(acc, contributions[src])
    return acc


# -- ghost-layer exchange ----------------------------------------------------

class ExchangePlan:
    """Face-neighbor topology of a block storage, grouped by axis.

    Entries are ``(block_id, axis, direction, peer_block_id, peer_worker)``;
    the actual slab intervals are derived per field at exchange time because
    they depend on each field's ghost layer count.
    """

    def __init__(self, storage: BlockStorage):
        self.storage = storage
        self.entries = {0: [], 1: [], 2: []}
        dims = storage.grid_dims
        for axis in range(3):
            for bid in sorted(storage.blocks):
                block = storage.blocks[bid]
                for direction in (-1, 1):
                    pos = list(block.grid_pos)
                    pos[axis] += direction
                    if not 0 <= pos[axis] < dims[axis]:
                        if not storage.periodicity[axis]:
                            continue
                        pos[axis] %= dims[axis]
                    peer = storage.block_at(tuple(pos))
                    if peer is None:
                        continue
                    self.entries[axis].append(
                        (bid, axis, direction, peer.id, storage.owner_of(peer.id)))

    def local_entries(self, axis, worker_id):
        return [e for e in self.entries[axis]
                if self.storage.owner_of(e[0]) == worker_id]


def _boundary_slab(field, axis, direction):
    """Interior slab of thickness g facing ``direction``; full transverse span."""
    g = field.ghost_layers
    full = field.full_view()
    n = field.requested_size[axis]
    sl = [slice(None)] * 4
    sl[axis] = slice(n, n + g) if direction > 0 else slice(g, 2 * g)
    return full[tuple(sl)]


def _ghost_slab(field, axis, direction):
    """Ghost slab on side ``direction``; full transverse span."""
    g = field.ghost_layers
    full = field.full_view()
    n = field.requested_size[axis]
    sl = [slice(None)] * 4
    sl[axis] = slice(n + g, n + 2 * g) if direction > 0 else slice(0, g)
    return full[tuple(sl)]


def exchange_ghost_layers(plan: ExchangePlan, field_names, transport: Transport):
    """Three sequential axis sweeps (x, y, z) synchronizing ghost slabs.

    Each sweep sends the full transverse span including ghost cells already
    filled by earlier sweeps, so edges and corners are correct after the z
    sweep without any diagonal messages.
    """
    if isinstance(field_names, str):
        field_names = [field_names]
    storage = plan.storage
    me = transport.self_id
    ghost_counts = {}
    for name in field_names:
        for bid in sorted(storage.blocks):
            if storage.owner_of(bid) != me:
                continue
            block = storage.blocks[bid]
            if name not in block.fields:
                raise TransportError(f"field '{name}' missing on block {bid}")
            g = block.fields[name].ghost_layers
            if ghost_counts.setdefault(name, g) != g:
                raise TransportError(f"field '{name}' has mismatched ghost layers")
            if g < 1:
                raise TransportError(f"field '{name}' needs >= 1 ghost layer to exchange")

    for axis in range(3):
        entries = plan.local_entries(axis, me)
        local_copies = []
        for (bid, _, direction, peer_bid, peer_worker) in entries:
            block = storage.blocks[bid]
            for name in field_names:
                slab = _boundary_slab(block.fields[name], axis, direction)
                if peer_worker == me:
                    local_copies.append((peer_bid, direction, name, slab.copy()))
                else:
                    tag = message_tag(bid, axis, direction, name)
                    transport.send(peer_worker, tag, np.ascontiguousarray(slab).tobytes())
        # local slabs land in the peer block's ghost region facing back at us
        for (peer_bid, direction, name, data) in local_copies:
            fld = storage.blocks[peer_bid].fields[name]
            ghost = _ghost_slab(fld, axis, -direction)
            ghost[...] = data
        for (bid, _, direction, peer_bid, peer_worker) in entries:
            if peer_worker == me:
                continue
            for name in field_names:
                fld = storage.blocks[bid].fields[name]
                ghost = _ghost_slab(fld, axis, direction)
                tag = message_tag(peer_bid, axis, -direction, name)
                raw = transport.recv(peer_worker, tag)
                ghost[...] = np.frombuffer(raw, dtype=np.float64).reshape(ghost.shape)


# -- slice gather -------------------------------------------------------------

def gather_slice(storage: BlockStorage, fixed, field_name, f_index, coarsen,
                 transport: Transport, root=0):
    """Collect every ``coarsen``-th cell along the free axis onto the root.

    ``fixed`` maps two of the axes (0/1/2 or 'x'/'y'/'z') to global
    coordinates; the remaining axis is sampled at k*coarsen.  Returns a 1D
    array on the root and ``None`` elsewhere.
    """
    axis_names = {"x": 0, "y": 1, "z": 2}
    fixed = {axis_names.get(k, k): int(v) for k, v in fixed.items()}
    if len(fixed) != 2 or any(a not in (0, 1, 2) for a in fixed):
        raise TransportError(f"need exactly two fixed axes out of x/y/z, got {fixed}")
    free_axis = ({0, 1, 2} - set(fixed)).pop()
    if coarsen < 1:
        raise TransportError("coarsen must be >= 1")
    for a, c in fixed.items():
        if not 0 <= c < storage.global_size[a]:
            raise TransportError(f"line coordinate {c} outside domain on axis {a}")

    n = storage.global_size[free_axis]
    count = (n + coarsen - 1) // coarsen
    me = transport.self_id

    indices, values = [], []
    for block in storage.local_blocks(me):
        lo, hi = block.offset, block.global_interval.max
        if any(not lo[a] <= fixed[a] <= hi[a] for a in fixed):
            continue
        view = block.fields[field_name].interior_view()
        first = -(-lo[free_axis] // coarsen)  # ceil division: first sample in block
        for k in range(first, count):
            pos = k * coarsen
            if pos > hi[free_axis]:
                break
            coord = [0, 0, 0]
            for a, c in fixed.items():
                coord[a] = c - lo[a]
            coord[free_axis] = pos - lo[free_axis]
            indices.append(k)
            values.append(view[coord[0], coord[1], coord[2], f_index])

    idx_bytes = np.asarray(indices, dtype=np.int64).tobytes()
    payload = (struct.pack("<Q", len(idx_bytes)) + idx_bytes
               + np.asarray(values, dtype=np.float64).tobytes())
    if me != root:
        transport.send(root, TAG_GATHER, payload)
        return None
    out = np.zeros(count, dtype=np.float64)
    for src in range(transport.worker_count):
        raw = payload if src == root else transport.recv(src, TAG_GATHER)
        (idx_len,) = struct.unpack_from("<Q", raw)
        idx = np.frombuffer(raw[8:8 + idx_len], dtype=np.int64)
        val = np.frombuffer(raw[8 + idx_len:], dtype=np.float64)
        out[idx] = val
    return out


def gather_field_global(storage, name, f_index, transport: Transport, root=0):
    """Assemble one field component over the whole domain on the root."""
    me = transport.self_id
    if me != root:
        for block in storage.local_blocks(me):
            data = np.ascontiguousarray(
                block.fields[name].interior_view()[..., f_index])
            transport.send(root, TAG_GATHER, data.tobytes())
        return None
    out = np.zeros(storage.global_size, dtype=np.float64)
    for wid in range(transport.worker_count):
        for block in storage.local_blocks(wid):
            shape = block.size
            if wid == root:
                data = block.fields[name].interior_view()[..., f_index]
            else:
                data = np.frombuffer(transport.recv(wid, TAG_GATHER),
                                     dtype=np.float64).reshape(shape)
            lo = block.offset
            out[lo[0]:lo[0] + shape[0], lo[1]:lo[1] + shape[1],
                lo[2]:lo[2] + shape[2]] = data
    return out


def scatter_field_global(storage, name, global_arr, transport: Transport,
                         f_index=0, root=0):
    """Distribute a global array back into the owning blocks' field component."""
    me = transport.self_id
    if me == root:
        for wid in range(transport.worker_count):
            for block in storage.local_blocks(wid):
                lo, shape = block.offset, block.size
                piece = np.ascontiguousarray(
                    global_arr[lo[0]:lo[0] + shape[0], lo[1]:lo[1] + shape[1],
                               lo[2]:lo[2] + shape[2]])
                if wid == root:
                    block.fields[name].interior_view()[..., f_index] = piece
                else:
                    transport.send(wid, TAG_BCAST, piece.tobytes())
    else:
        for block in storage.local_blocks(me):
            raw = transport.recv(root, TAG_BCAST)
            block.fields[name].interior_view()[..., f_index] = \
                np.frombuffer(raw, dtype=np.float64).reshape(block.size)
