"""Domain decomposition into equally sized blocks and worker assignment.

The global cell domain is tiled by uniform blocks; a predicate may discard
blocks, and the survivors are spread over workers by a greedy
longest-processing-time heuristic on per-block weights.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field as dc_field

from .field import create_field


class DecompositionError(ValueError):
    pass


@dataclass(frozen=True)
class CellInterval:
    """Inclusive axis-aligned box of global cell coordinates."""

    min: tuple
    max: tuple

    def __post_init__(self):
        if any(a > b for a, b in zip(self.min, self.max)):
            raise DecompositionError(f"empty interval {self.min}..{self.max}")

    @property
    def size(self):
        return tuple(b - a + 1 for a, b in zip(self.min, self.max))

    def contains(self, cell):
        return all(a <= c <= b for a, c, b in zip(self.min, cell, self.max))


@dataclass
class Block:
    """Unit of distribution; owns the named fields living on its cells."""

    id: int
    global_interval: CellInterval
    grid_pos: tuple  # block coordinates in the block grid
    weight: float = 1.0
    fields: dict = dc_field(default_factory=dict)

    @property
    def size(self):
        return self.global_interval.size

    @property
    def offset(self):
        return self.global_interval.min

    def add_field(self, name, f_size=1, ghost_layers=0, layout=None, alignment=8):
        from .field import FieldLayout
        layout = FieldLayout.AOS if layout is None else layout
        nx, ny, nz = self.size
        fld = create_field(name, (nx, ny, nz, f_size), ghost_layers, layout, alignment)
        self.fields[name] = fld
        return fld

    def __getitem__(self, name):
        return self.fields[name]


class BlockStorage:
    """Blocks, their tiling of the global domain, and the worker assignment."""

    def __init__(self, global_size, block_size, blocks, periodicity=(False, False, False)):
        self.global_size = tuple(int(v) for v in global_size)
        self.block_size = tuple(int(v) for v in block_size)
        self.periodicity = tuple(bool(p) for p in periodicity)
        self.blocks = {b.id: b for b in blocks}
        self.assignment = {}
        self.n_workers = None  # set when assigned via make_storage
        self.grid_dims = tuple(g // s for g, s in zip(self.global_size, self.block_size))
        self._by_grid_pos = {b.grid_pos: b.id for b in blocks}

    def cell_count(self):
        """Global extents, independent of how many blocks were discarded."""
        return self.global_size

    def block_at(self, grid_pos):
        bid = self._by_grid_pos.get(tuple(grid_pos))
        return self.blocks[bid] if bid is not None else None

    def worker_count(self):
        return max(self.assignment.values()) + 1 if self.assignment else 0

    def local_blocks(self, worker_id):
        """Blocks assigned to one worker, in ascending id order.

        A worker may own no blocks at all (more workers than blocks); only
        ids outside the run's worker range are rejected.
        """
        bound = self.n_workers if self.n_workers is not None else \
            (max(self.assignment.values()) + 1 if self.assignment else 1)
        if not 0 <= worker_id < bound:
            raise DecompositionError(f"unknown worker id {worker_id}")
        return [self.blocks[bid] for bid in sorted(self.blocks)
                if self.assignment.get(bid) == worker_id]

    def owner_of(self, block_id):
        return self.assignment[block_id]


def decompose_domain(global_size, block_size, keep_predicate=None):
    """Tile the domain with uniform blocks, discarding those the predicate rejects.

    ``block_size`` must divide ``global_size`` on every axis; block ids are
    assigned in x-fastest scan order over the block grid.
    """
    global_size = tuple(int(v) for v in global_size)
    block_size = tuple(int(v) for v in block_size)
    for g, s in zip(global_size, block_size):
        if s < 1 or g < 1 or g % s != 0:
            raise DecompositionError(
                f"block size {block_size} does not divide global size {global_size}")
    nbx, nby, nbz = (g // s for g, s in zip(global_size, block_size))
    blocks = []
    bid = 0
    for bz in range(nbz):
        for by in range(nby):
            for bx in range(nbx):
                lo = (bx * block_size[0], by * block_size[1], bz * block_size[2])
                hi = tuple(l + s - 1 for l, s in zip(lo, block_size))
                interval = CellInterval(lo, hi)
                if keep_predicate is None or keep_predicate(interval):
                    blocks.append(Block(bid, interval, (bx, by, bz)))
                bid += 1
    return blocks


def assign_blocks(blocks, worker_count, weight_fn=None):
    """Greedy LPT assignment: heaviest block first onto the lightest worker.

    Deterministic: blocks sort by (descending weight, ascending id) and load
    ties break toward the lowest worker id.  Max load is within 2x optimal.
    """
    if worker_count < 1:
        raise DecompositionError("worker_count must be >= 1")
    weights = {}
    for b in blocks:
        w = float(weight_fn(b)) if weight_fn is not None else float(b.weight)
        if w < 0:
            raise DecompositionError(f"negative weight {w} for block {b.id}")
        weights[b.id] = w
        b.weight = w
    order = sorted(blocks, key=lambda b: (-weights[b.id], b.id))
    heap = [(0.0, wid) for wid in range(worker_count)]
    heapq.heapify(heap)
    assignment = {}
    for b in order:
        load, wid = heapq.heappop(heap)
        assignment[b.id] = wid
        heapq.heappush(heap, (load + weights[b.id], wid))
    return assignment


def make_storage(global_size, block_size, worker_count=1, periodicity=(False, False, False),
                 keep_predicate=None, weight_fn=None):
    """Decompose, balance, and wrap everything in a BlockStorage."""
    blocks = decompose_domain(global_size, block_size, keep_predicate)
    storage = BlockStorage(global_size, block_size, blocks, periodicity)
    storage.assignment = assign_blocks(blocks, worker_count, weight_fn)
    storage.n_workers = worker_count
    return storage
