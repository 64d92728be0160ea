"""Free-surface extension: fill levels, interface layer, mass, bubbles.

The liquid phase is simulated; gas cells carry no flow state.  A closed
layer of interface cells separates the phases, reconstructs the PDFs that
would arrive from the gas side, and exchanges mass with its neighbors.
Connected gas regions are tracked as bubbles whose pressure is the ratio of
initial to current volume.
"""

from __future__ import annotations

import logging
import pickle
from collections import deque

import numpy as np

from . import lbm
from .comms import (TAG_GATHER, broadcast_bytes, exchange_ghost_layers,
                    gather_field_global, scatter_field_global)
from .field import swap_buffers
from .lbm import (FLUID, GAS, INTERFACE, StreamMasks, downstream_view,
                  equilibrium, upstream_view)

log = logging.getLogger("blockforge.freesurface")

NO_BUBBLE = -1.0

# face neighbor offsets, used by the closed-layer and labeling rules
_FACES = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


class FreeSurfaceError(RuntimeError):
    pass


class FreeSurfaceParams:
    """Lattice surface tension plus the conversion/relabel tuning knobs."""

    def __init__(self, sigma=0.0, conversion_epsilon=1e-2, relabel_interval=100):
        if sigma < 0.0:
            raise FreeSurfaceError(f"surface tension must be >= 0, got {sigma}")
        if not 0.0 < conversion_epsilon < 0.5:
            raise FreeSurfaceError(f"conversion epsilon must be in (0, 0.5), got {conversion_epsilon}")
        if relabel_interval < 1:
            raise FreeSurfaceError("relabel interval must be positive")
        self.sigma = sigma
        self.conversion_epsilon = conversion_epsilon
        self.relabel_interval = relabel_interval

    @property
    def fill_ghost_layers(self):
        # the curvature stencil reads two cells deep; plain advection only one
        return 2 if self.sigma > 0.0 else 1


class BubbleTable:
    """Replicated registry of bubbles: id -> (V0, V) plus merge union-find."""

    def __init__(self):
        self.volumes = {}  # id -> [V0, V]
        self.parent = {}

    def find(self, bid):
        root = bid
        while self.parent.get(root, root) != root:
            root = self.parent[root]
        return root

    def create(self, bid, volume):
        self.volumes[bid] = [float(volume), float(volume)]
        self.parent[bid] = bid

    def merge(self, a, b):
        """Union two bubbles; the smaller id survives, volumes add."""
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        keep, drop = (ra, rb) if ra < rb else (rb, ra)
        self.volumes[keep][0] += self.volumes[drop][0]
        self.volumes[keep][1] += self.volumes[drop][1]
        del self.volumes[drop]
        self.parent[drop] = keep
        return keep

    def add_volume(self, bid, dv):
        self.volumes[self.find(bid)][1] += dv

    def pressure(self, bid):
        v0, v = self.volumes[self.find(bid)]
        if v <= 0.0:
            raise FreeSurfaceError(f"bubble {bid} has non-positive volume {v}")
        return v0 / v

    def total_volume(self):
        return sum(v for _, v in self.volumes.values())

    def ratio_lookup(self, max_id):
        """Array mapping raw cell labels to V0/V of their merged bubble."""
        out = np.ones(max(max_id + 1, 1), dtype=np.float64)
        for bid in range(max_id + 1):
            root = self.find(bid)
            if root in self.volumes:
                v0, v = self.volumes[root]
                out[bid] = v0 / v
        return out

    def state_bytes(self):
        return pickle.dumps((self.volumes, self.parent))

    def load_state(self, raw):
        self.volumes, self.parent = pickle.loads(raw)


class FreeSurfaceRuntime:
    """Per-worker free-surface state: parameters, bubbles, bookkeeping arrays."""

    def __init__(self, params: FreeSurfaceParams):
        self.params = params
        self.bubbles = BubbleTable()
        self.prev_gasvol = {}   # block id -> (nx,ny,nz) gas volume at last update
        self.rho_cache = {}     # block id -> post-collision density, one step only
        self.lost_mass = 0.0
        self.conversions_last_step = 0


def setup_freesurface_fields(block, params: FreeSurfaceParams):
    g = params.fill_ghost_layers
    block.add_field("fill", f_size=1, ghost_layers=g)
    block.add_field("mass", f_size=1, ghost_layers=1)
    block.add_field("bubble_id", f_size=1, ghost_layers=1)
    block.fields["bubble_id"].data[...] = NO_BUBBLE


# -- classification -----------------------------------------------------------

def classify_block(block):
    """Map fill levels to Gas/Interface/Liquid flags on non-boundary cells."""
    fill = block.fields["fill"].interior_view()[..., 0]
    flags = block.fields["flags"].interior_view()[..., 0]
    if np.any(fill < -1e-9) or np.any(fill > 1.0 + 1e-9):
        bad = float(fill.flat[np.argmax(np.abs(fill - 0.5))])
        raise FreeSurfaceError(f"fill level outside [0, 1]: extreme value {bad}")
    phase = (flags == FLUID) | (flags == GAS) | (flags == INTERFACE)
    flags[...] = np.where(phase & (fill >= 1.0), FLUID, flags)
    flags[...] = np.where(phase & (fill <= 0.0), GAS, flags)
    flags[...] = np.where(phase & (fill > 0.0) & (fill < 1.0), INTERFACE, flags)


def _neighbor_any(flags_full, g, shape, dirs, predicate):
    """True where any neighbor along the given offsets satisfies the predicate."""
    out = np.zeros(shape, dtype=bool)
    for e in dirs:
        out |= predicate(upstream_view(flags_full, e, g, shape))
    return out


def close_interface_layer(block, stencil):
    """Insert interface cells so no liquid cell has a gas cell in any stencil
    direction.

    Face closure alone is not enough: diagonal PDF links between liquid and
    gas would bypass the mass ledger.
    """
    flags_field = block.fields["flags"]
    g = flags_field.ghost_layers
    flags_full = flags_field.full_view()[..., 0]
    flags = flags_field.interior_view()[..., 0]
    shape = flags.shape
    dirs = [tuple(int(c) for c in e) for e in stencil.e[1:]]
    gas_adjacent = _neighbor_any(flags_full, g, shape, dirs, lambda f: f == GAS)
    violating = (flags == FLUID) & gas_adjacent
    flags[...] = np.where(violating, INTERFACE, flags)
    return int(violating.sum())


def classify_cells(storage, stencil, plan, transport):
    """Classify all local blocks, then repair the layer with halo knowledge."""
    me = transport.self_id
    for block in storage.local_blocks(me):
        classify_block(block)
    exchange_ghost_layers(plan, ["flags", "fill"], transport)
    for block in storage.local_blocks(me):
        close_interface_layer(block, stencil)
    exchange_ghost_layers(plan, ["flags"], transport)


# -- interface geometry -------------------------------------------------------

def _parker_youngs_gradient(fill_ext):
    """Weighted 26-neighbor gradient of the fill level on a 1-cell-shrunk grid."""
    nx, ny, nz = (s - 2 for s in fill_ext.shape)
    grad = [np.zeros((nx, ny, nz)) for _ in range(3)]
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if dx == dy == dz == 0:
                    continue
                weight = {1: 4.0, 2: 2.0, 3: 1.0}[abs(dx) + abs(dy) + abs(dz)]
                sl = fill_ext[1 + dx:1 + dx + nx, 1 + dy:1 + dy + ny, 1 + dz:1 + dz + nz]
                if dx:
                    grad[0] += (weight * dx) * sl
                if dy:
                    grad[1] += (weight * dy) * sl
                if dz:
                    grad[2] += (weight * dz) * sl
    return grad


def interface_geometry(block, params: FreeSurfaceParams):
    """Normals (liquid -> gas) and curvature for every cell of the block.

    Curvature is positive for a convex gas region (a bubble), so the Laplace
    term raises the gas density inside it.  With sigma == 0 the geometry is
    skipped and zero curvature is returned.

    Returns (normal (nx,ny,nz,3), kappa (nx,ny,nz), degenerate mask); values
    are meaningful on interface cells only.
    """
    fill_field = block.fields["fill"]
    shape = fill_field.interior_view()[..., 0].shape
    if params.sigma == 0.0:
        normal = np.zeros(shape + (3,))
        normal[..., 2] = 1.0
        return normal, np.zeros(shape), np.zeros(shape, dtype=bool)
    g = fill_field.ghost_layers
    if g < 2:
        raise FreeSurfaceError("curvature stencil needs 2 fill ghost layers")
    full = fill_field.full_view()[..., 0]

    # normals on interior + one ring, so the divergence can be centered
    trim = g - 2
    if trim > 0:
        full = full[trim:-trim, trim:-trim, trim:-trim]
    grad = _parker_youngs_gradient(full)  # one ring smaller: (n+2)^3
    norm = np.sqrt(grad[0] ** 2 + grad[1] ** 2 + grad[2] ** 2)
    degenerate_ext = norm < 1e-12
    safe = np.where(degenerate_ext, 1.0, norm)
    n_ext = [np.where(degenerate_ext, 0.0, -gc / safe) for gc in grad]
    n_ext[2] = np.where(degenerate_ext, 1.0, n_ext[2])

    div = np.zeros(shape)
    for axis in range(3):
        comp = n_ext[axis]
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        div += 0.5 * (comp[tuple(hi)] - comp[tuple(lo)])
    kappa = -div
    normal = np.stack([c[1:-1, 1:-1, 1:-1] for c in n_ext], axis=-1)
    degenerate = degenerate_ext[1:-1, 1:-1, 1:-1]
    kappa = np.where(degenerate, 0.0, kappa)
    return normal, kappa, degenerate


# -- free boundary reconstruction ---------------------------------------------

def reconstruct_free_boundary(block, stencil, runtime: FreeSurfaceRuntime):
    """Replace PDFs arriving from gas cells at interface cells.

    For each direction with a gas upstream neighbor the incoming PDF is set
    to feq_a(rho_G, u) + feq_opp(rho_G, u) - f_opp(x) where rho_G follows
    from the neighboring bubble's pressure and the local Laplace term.
    """
    pdf_field = block.fields["pdf"]
    g = pdf_field.ghost_layers
    pdf = pdf_field.interior_view()
    flags_field = block.fields["flags"]
    flags_full = flags_field.full_view()[..., 0]
    flags = flags_field.interior_view()[..., 0]
    bid_full = block.fields["bubble_id"].full_view()[..., 0]
    shape = flags.shape
    interface = flags == INTERFACE
    if not interface.any():
        return

    snapshot = pdf.copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        rho, flux = lbm._moments(snapshot, stencil)
        ux, uy, uz = (flux[i] / rho for i in range(3))
    usq = ux * ux + uy * uy + uz * uz

    sigma = runtime.params.sigma
    if sigma > 0.0:
        _, kappa, _ = interface_geometry(block, runtime.params)
        laplace = 6.0 * sigma * kappa
    else:
        laplace = 0.0

    max_id = int(bid_full.max()) if bid_full.size else 0
    ratio = runtime.bubbles.ratio_lookup(max(max_id, 0))

    for a in range(1, stencil.Q):
        up_flags = upstream_view(flags_full, stencil.e[a], flags_field.ghost_layers, shape)
        mask = interface & (up_flags == GAS)
        if not mask.any():
            continue
        up_ids = upstream_view(bid_full, stencil.e[a], 1, shape)
        if np.any(mask & (up_ids < 0)):
            raise FreeSurfaceError("gas neighbor without a bubble id during reconstruction")
        ids = np.where(mask, up_ids, 0).astype(np.int64)
        rho_gas = ratio[ids] + laplace
        eu = (stencil.e[a, 0] * ux + stencil.e[a, 1] * uy + stencil.e[a, 2] * uz)
        # feq_a + feq_opp: the odd terms cancel
        both = 2.0 * stencil.w[a] * rho_gas * (1.0 + 4.5 * eu * eu - 1.5 * usq)
        b = int(stencil.opp[a])
        pdf[..., a] = np.where(mask, both - snapshot[..., b], pdf[..., a])


# -- mass advection -----------------------------------------------------------

def advect_mass(block, stencil, runtime: FreeSurfaceRuntime):
    """Exchange mass between interface cells and their neighbors.

    Uses post-collision PDFs (the 'pdf' field before the swap).  The link
    deltas are exactly antisymmetric, so total mass is conserved up to
    rounding.
    """
    pdf_field = block.fields["pdf"]
    g = pdf_field.ghost_layers
    pdf_full = pdf_field.full_view()
    pdf = pdf_field.interior_view()
    flags_field = block.fields["flags"]
    flags_full = flags_field.full_view()[..., 0]
    flags = flags_field.interior_view()[..., 0]
    fill_field = block.fields["fill"]
    fill_full = fill_field.full_view()[..., 0]
    fill = fill_field.interior_view()[..., 0]
    mass = block.fields["mass"].interior_view()[..., 0]
    shape = flags.shape
    interface = flags == INTERFACE

    # the cell's density after this step comes from the streamed buffer; fill
    # and conversion bookkeeping must use it so the mass ledger matches the
    # density a converted cell will carry
    pdf_next = block.fields["pdf_tmp"].interior_view()
    rho = pdf_next[..., 0].copy()
    for a in range(1, stencil.Q):
        rho += pdf_next[..., a]
    runtime.rho_cache[block.id] = rho

    if interface.any():
        dm = np.zeros(shape)
        fg = flags_field.ghost_layers
        for a in range(1, stencil.Q):
            b = int(stencil.opp[a])
            nb_flags = downstream_view(flags_full, stencil.e[a], fg, shape)
            nb_f_opp = downstream_view(pdf_full[..., b], stencil.e[a], g, shape)
            link = nb_f_opp - pdf[..., a]
            liquid_nb = interface & (nb_flags == FLUID)
            interface_nb = interface & (nb_flags == INTERFACE)
            if liquid_nb.any():
                dm += np.where(liquid_nb, link, 0.0)
            if interface_nb.any():
                nb_fill = downstream_view(fill_full, stencil.e[a],
                                          fill_field.ghost_layers, shape)
                dm += np.where(interface_nb, link * 0.5 * (fill + nb_fill), 0.0)
        mass[...] = np.where(interface, mass + dm, mass)
        with np.errstate(divide="ignore", invalid="ignore"):
            fill[...] = np.where(interface, mass / rho, fill)


# -- cell conversion ----------------------------------------------------------

_MARK_NONE = 0.0
_MARK_LIQUID = 1.0
_MARK_GAS = 2.0


def _ensure_marker_field(block):
    if "conv_marker" not in block.fields:
        block.add_field("conv_marker", f_size=1, ghost_layers=1)
    return block.fields["conv_marker"]


def convert_cells(storage, stencil, runtime: FreeSurfaceRuntime, plan, transport):
    """Commit threshold crossings, repair the layer, redistribute mass.

    Runs collectively: conversion markers and flags are exchanged between
    passes so repairs see conversions in neighboring blocks.  Returns the
    number of local conversion events.
    """
    me = transport.self_id
    eps = runtime.params.conversion_epsilon
    local = storage.local_blocks(me)
    events = 0

    for block in local:
        flags = block.fields["flags"].interior_view()[..., 0]
        fill = block.fields["fill"].interior_view()[..., 0]
        mass = block.fields["mass"].interior_view()[..., 0]
        marker = _ensure_marker_field(block).interior_view()[..., 0]
        marker[...] = _MARK_NONE
        rho = runtime.rho_cache.get(block.id)
        if rho is None:
            pdf_next = block.fields["pdf_tmp"].interior_view()
            rho = pdf_next[..., 0].copy()
            for a in range(1, stencil.Q):
                rho += pdf_next[..., a]
            runtime.rho_cache[block.id] = rho
        interface = flags == INTERFACE
        to_liquid = interface & (fill >= 1.0 + eps)
        to_gas = interface & (fill <= -eps)
        block._pending_excess = {}
        for (x, y, z) in np.argwhere(to_liquid):
            excess = mass[x, y, z] - rho[x, y, z]
            block._pending_excess[(x, y, z)] = excess
            mass[x, y, z] = rho[x, y, z]
            fill[x, y, z] = 1.0
            flags[x, y, z] = FLUID
            marker[x, y, z] = _MARK_LIQUID
            events += 1
        for (x, y, z) in np.argwhere(to_gas):
            block._pending_excess[(x, y, z)] = mass[x, y, z]
            mass[x, y, z] = 0.0
            fill[x, y, z] = 0.0
            flags[x, y, z] = GAS
            marker[x, y, z] = _MARK_GAS
            events += 1

    exchange_ghost_layers(plan, ["flags", "conv_marker", "pdf_tmp"], transport)

    for block in local:
        flags_field = block.fields["flags"]
        g = flags_field.ghost_layers
        flags_full = flags_field.full_view()[..., 0]
        flags = flags_field.interior_view()[..., 0]
        marker_full = block.fields["conv_marker"].full_view()[..., 0]
        fill = block.fields["fill"].interior_view()[..., 0]
        mass = block.fields["mass"].interior_view()[..., 0]
        marker = block.fields["conv_marker"].interior_view()[..., 0]
        shape = flags.shape
        flags_before = flags_full.copy()

        dirs = [tuple(int(c) for c in e) for e in stencil.e[1:]]
        near_new_liquid = _neighbor_any(
            marker_full, 1, shape, dirs, lambda m: m == _MARK_LIQUID)
        near_new_gas = _neighbor_any(
            marker_full, 1, shape, dirs, lambda m: m == _MARK_GAS)

        gas_side = (flags == GAS) & near_new_liquid
        liquid_side = (flags == FLUID) & near_new_gas
        if gas_side.any():
            fresh = gas_side & (marker == _MARK_NONE)  # true gas, needs flow state
            flags[...] = np.where(gas_side, INTERFACE, flags)
            fill[...] = np.where(gas_side & (marker == _MARK_NONE), 0.0, fill)
            mass[...] = np.where(gas_side & (marker == _MARK_NONE), 0.0, mass)
            _init_fresh_interface_pdfs(block, stencil, np.argwhere(fresh), flags_before, g)
        if liquid_side.any():
            rho = runtime.rho_cache.get(block.id)
            flags[...] = np.where(liquid_side, INTERFACE, flags)
            fill[...] = np.where(liquid_side, 1.0, fill)
            if rho is not None:
                mass[...] = np.where(liquid_side, rho, mass)
            else:
                mass[...] = np.where(liquid_side, 1.0, mass)

    # distribute excess / deficit among face-adjacent interface cells
    for block in local:
        pending = getattr(block, "_pending_excess", {})
        if not pending:
            continue
        flags = block.fields["flags"].interior_view()[..., 0]
        fill = block.fields["fill"].interior_view()[..., 0]
        mass = block.fields["mass"].interior_view()[..., 0]
        rho = runtime.rho_cache.get(block.id)
        interface_cells = None
        nx, ny, nz = flags.shape
        for (cell, excess) in sorted(pending.items()):
            if excess == 0.0:
                continue
            x, y, z = cell
            targets = []
            for (dx, dy, dz) in _FACES:
                cx, cy, cz = x + dx, y + dy, z + dz
                if 0 <= cx < nx and 0 <= cy < ny and 0 <= cz < nz \
                        and flags[cx, cy, cz] == INTERFACE:
                    targets.append((cx, cy, cz))
            if not targets:
                if interface_cells is None:
                    interface_cells = np.argwhere(flags == INTERFACE)
                if len(interface_cells):
                    d2 = ((interface_cells - np.array(cell)) ** 2).sum(axis=1)
                    targets = [tuple(interface_cells[int(np.argmin(d2))])]
                    log.warning("block %d: excess mass from %s routed to nearest "
                                "interface cell %s", block.id, cell, targets[0])
                else:
                    runtime.lost_mass += excess
                    log.warning("block %d: no interface cell available, %g mass "
                                "held back", block.id, excess)
                    continue
            share = excess / len(targets)
            for (cx, cy, cz) in targets:
                mass[cx, cy, cz] += share
                if rho is not None and rho[cx, cy, cz] > 0.0:
                    fill[cx, cy, cz] = mass[cx, cy, cz] / rho[cx, cy, cz]
        block._pending_excess = {}

    exchange_ghost_layers(plan, ["flags", "fill", "mass", "bubble_id"], transport)
    runtime.conversions_last_step = events
    return events


def _init_fresh_interface_pdfs(block, stencil, cells, flags_before, g):
    """Equilibrium-initialize PDFs of cells that just left the gas phase.

    Averages density and velocity over face neighbors that already carried
    flow state before this conversion sweep (pdf_tmp, ghosts included).
    """
    if len(cells) == 0:
        return
    pdf_tmp_full = block.fields["pdf_tmp"].full_view()
    pg = block.fields["pdf_tmp"].ghost_layers
    nx, ny, nz = block.fields["pdf_tmp"].requested_size[:3]
    for (x, y, z) in cells:
        rho_sum, u_sum, count = 0.0, np.zeros(3), 0
        for (dx, dy, dz) in _FACES:
            cx, cy, cz = x + dx, y + dy, z + dz
            if not (-g <= cx < nx + g and -g <= cy < ny + g and -g <= cz < nz + g):
                continue
            f = flags_before[cx + g, cy + g, cz + g]
            if f not in (FLUID, INTERFACE):
                continue
            fvec = pdf_tmp_full[cx + pg, cy + pg, cz + pg]
            r = float(fvec.sum())
            if r <= 0.0:
                continue
            mom = np.zeros(3)
            for a in range(1, stencil.Q):
                mom += stencil.e[a] * fvec[a]
            rho_sum += r
            u_sum += mom / r
            count += 1
        if count:
            rho_avg, u_avg = rho_sum / count, u_sum / count
        else:
            rho_avg, u_avg = 1.0, np.zeros(3)
        pdf_tmp_full[x + pg, y + pg, z + pg] = equilibrium(rho_avg, u_avg, stencil)


# -- bubble bookkeeping --------------------------------------------------------

def _gas_volume(flags, fill):
    return np.where(flags == GAS, 1.0,
                    np.where(flags == INTERFACE, 1.0 - fill, 0.0))


def update_bubbles(storage, runtime: FreeSurfaceRuntime, transport, step):
    """Incremental volume tracking, merge handling, periodic global relabel."""
    me = transport.self_id
    dv = {}
    merges = set()
    for block in storage.local_blocks(me):
        flags = block.fields["flags"].interior_view()[..., 0]
        fill = block.fields["fill"].interior_view()[..., 0]
        bid_field = block.fields["bubble_id"]
        bid = bid_field.interior_view()[..., 0]
        bid_full = bid_field.full_view()[..., 0]
        gasvol = _gas_volume(flags, fill)
        prev = runtime.prev_gasvol.get(block.id)
        if prev is None:
            prev = np.zeros_like(gasvol)
        in_region = (flags == GAS) | (flags == INTERFACE)

        lost = (bid >= 0) & ~in_region
        for (x, y, z) in np.argwhere(lost):
            label = int(bid[x, y, z])
            dv[label] = dv.get(label, 0.0) - float(prev[x, y, z])
            bid[x, y, z] = NO_BUBBLE

        fresh = in_region & (bid < 0)
        nxyz = flags.shape
        for (x, y, z) in np.argwhere(fresh):
            labels = set()
            for (dx, dy, dz) in _FACES:
                lx, ly, lz = x + dx + 1, y + dy + 1, z + dz + 1
                v = bid_full[lx, ly, lz]
                if v >= 0:
                    labels.add(int(v))
            if labels:
                keep = min(labels)
                bid[x, y, z] = float(keep)
                for other in labels:
                    if other != keep:
                        merges.add((keep, other))

        labeled = bid >= 0
        delta = gasvol - prev
        for (x, y, z) in np.argwhere(labeled & (delta != 0.0)):
            label = int(bid[x, y, z])
            dv[label] = dv.get(label, 0.0) + float(delta[x, y, z])
        runtime.prev_gasvol[block.id] = gasvol

    # fold increments and merges on the root, then broadcast the new table
    payload = pickle.dumps((dv, sorted(merges)))
    if me != 0:
        transport.send(0, TAG_GATHER, payload)
    else:
        table = runtime.bubbles
        for src in range(transport.worker_count):
            raw = payload if src == 0 else transport.recv(src, TAG_GATHER)
            w_dv, w_merges = pickle.loads(raw)
            for label in sorted(w_dv):
                table.add_volume(label, w_dv[label])
            for (a, b) in w_merges:
                table.merge(a, b)
    raw = broadcast_bytes(runtime.bubbles.state_bytes() if me == 0 else None, transport)
    runtime.bubbles.load_state(raw)
    runtime.rho_cache.clear()

    if step % runtime.params.relabel_interval == 0:
        relabel_bubbles(storage, runtime, transport)


def _flood_fill_labels(region_mask):
    """6-connected components of a boolean volume; labels by first-encounter order."""
    labels = np.full(region_mask.shape, -1, dtype=np.int64)
    next_label = 0
    nx, ny, nz = region_mask.shape
    for (sx, sy, sz) in np.argwhere(region_mask):
        if labels[sx, sy, sz] >= 0:
            continue
        queue = deque([(sx, sy, sz)])
        labels[sx, sy, sz] = next_label
        while queue:
            x, y, z = queue.popleft()
            for (dx, dy, dz) in _FACES:
                cx, cy, cz = x + dx, y + dy, z + dz
                if 0 <= cx < nx and 0 <= cy < ny and 0 <= cz < nz \
                        and region_mask[cx, cy, cz] and labels[cx, cy, cz] < 0:
                    labels[cx, cy, cz] = next_label
                    queue.append((cx, cy, cz))
        next_label += 1
    return labels, next_label


def relabel_bubbles(storage, runtime: FreeSurfaceRuntime, transport):
    """Global reconciliation: flood fill gas regions, recompute volumes exactly.

    Old reference volumes follow the cells: a component inherits V0 from the
    old bubbles overlapping it, split proportionally to the overlapped gas
    volume; uncovered gas enters at reference pressure.
    """
    me = transport.self_id
    flags_g = gather_field_global(storage, "flags", 0, transport)
    fill_g = gather_field_global(storage, "fill", 0, transport)
    bid_g = gather_field_global(storage, "bubble_id", 0, transport)

    if me == 0:
        region = (flags_g == GAS) | (flags_g == INTERFACE)
        labels, count = _flood_fill_labels(region)
        gasvol = _gas_volume(flags_g, fill_g)
        new_volumes = {}
        for c in range(count):
            sel = labels == c
            v = float(gasvol[sel].sum())
            old_overlap = {}
            for raw_old in np.unique(bid_g[sel]):
                if raw_old < 0:
                    continue
                old = runtime.bubbles.find(int(raw_old))
                amount = float(gasvol[sel & (bid_g == raw_old)].sum())
                old_overlap[old] = old_overlap.get(old, 0.0) + amount
            v0 = 0.0
            covered = 0.0
            for old in sorted(old_overlap):
                total_old = float(gasvol[_old_label_mask(bid_g, runtime.bubbles, old)].sum())
                if total_old > 0.0 and old in runtime.bubbles.volumes:
                    v0 += runtime.bubbles.volumes[old][0] * (old_overlap[old] / total_old)
                covered += old_overlap[old]
            v0 += max(v - covered, 0.0)  # fresh gas enters at reference pressure
            new_volumes[c] = [v0, v]
        table = BubbleTable()
        for c, (v0, v) in new_volumes.items():
            table.volumes[c] = [v0, v]
            table.parent[c] = c
        runtime.bubbles = table
        new_ids = np.where(region, labels.astype(np.float64), NO_BUBBLE)
    else:
        new_ids = None

    scatter_field_global(storage, "bubble_id", new_ids, transport)
    raw = broadcast_bytes(runtime.bubbles.state_bytes() if me == 0 else None, transport)
    runtime.bubbles.load_state(raw)
    # reset the incremental baseline to the exact recount
    for block in storage.local_blocks(me):
        flags = block.fields["flags"].interior_view()[..., 0]
        fill = block.fields["fill"].interior_view()[..., 0]
        runtime.prev_gasvol[block.id] = _gas_volume(flags, fill)


def _old_label_mask(bid_g, table, root):
    mask = np.zeros(bid_g.shape, dtype=bool)
    for raw in np.unique(bid_g):
        if raw >= 0 and table.find(int(raw)) == root:
            mask |= bid_g == raw
    return mask


# -- composition ---------------------------------------------------------------

def total_liquid_mass(storage, transport):
    """Sum of cell densities on liquid cells plus tracked mass on interface cells."""
    from .comms import SUM, reduce_scalar
    me = transport.self_id
    local = 0.0
    for block in storage.local_blocks(me):
        flags = block.fields["flags"].interior_view()[..., 0]
        mass = block.fields["mass"].interior_view()[..., 0]
        pdf = block.fields["pdf"].interior_view()
        rho = pdf.sum(axis=-1)
        local += float(rho[flags == FLUID].sum()) + float(mass[flags == INTERFACE].sum())
    return reduce_scalar(local, SUM, transport)


def initialize_free_surface(storage, stencil, runtime, plan, transport):
    """Classify, seed interface masses, and label the initial bubbles."""
    me = transport.self_id
    exchange_ghost_layers(plan, ["fill", "flags"], transport)
    classify_cells(storage, stencil, plan, transport)
    for block in storage.local_blocks(me):
        flags = block.fields["flags"].interior_view()[..., 0]
        fill = block.fields["fill"].interior_view()[..., 0]
        mass = block.fields["mass"].interior_view()[..., 0]
        pdf = block.fields["pdf"].interior_view()
        rho = pdf.sum(axis=-1)
        mass[...] = np.where(flags == FLUID, rho, np.where(flags == INTERFACE, fill * rho, 0.0))
        fill[...] = np.where(flags == FLUID, 1.0, np.where(flags == GAS, 0.0, fill))
    exchange_ghost_layers(plan, ["fill", "mass"], transport)
    relabel_bubbles(storage, runtime, transport)
    exchange_ghost_layers(plan, ["bubble_id"], transport)


def fslbm_timestep(storage, params, stencil, runtime: FreeSurfaceRuntime, plan,
                   transport, masks_by_block, step=1):
    """One free-surface LBM step; reduces to the plain step on all-liquid domains."""
    local = storage.local_blocks(transport.self_id)
    exchange_ghost_layers(plan, ["pdf", "fill", "flags", "bubble_id"], transport)
    # flag changes (own or a neighbor's, via ghosts) invalidate stream masks
    for block in local:
        masks_by_block[block.id] = StreamMasks(block, stencil)
    for block in local:
        reconstruct_free_boundary(block, stencil, runtime)
    for block in local:
        lbm.collide_block(block, params, stencil, masks_by_block[block.id])
    exchange_ghost_layers(plan, ["pdf"], transport)
    for block in local:
        masks = masks_by_block[block.id]
        lbm.stream_block(block, stencil, masks)
        lbm.apply_boundaries(block, stencil, masks)
    for block in local:
        advect_mass(block, stencil, runtime)
    convert_cells(storage, stencil, runtime, plan, transport)
    update_bubbles(storage, runtime, transport, step)
    for block in local:
        swap_buffers(block.fields["pdf"], block.fields["pdf_tmp"])
        lbm.update_macroscopic_fields(block, stencil)
