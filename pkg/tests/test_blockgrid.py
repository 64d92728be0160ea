import itertools

import numpy as np
import pytest

from blockforge.blockgrid import (DecompositionError, assign_blocks,
                                  decompose_domain, make_storage)


class TestDecompose:
    def test_channel_decomposition_count(self):
        blocks = decompose_domain((300, 100, 100), (100, 100, 100))
        assert len(blocks) == 3

    def test_predicate_rejecting_all(self):
        blocks = decompose_domain((4, 4, 4), (2, 2, 2), lambda iv: False)
        assert blocks == []

    def test_disjoint_cover(self):
        blocks = decompose_domain((4, 4, 4), (2, 2, 2))
        assert len(blocks) == 8
        seen = set()
        for b in blocks:
            lo, hi = b.global_interval.min, b.global_interval.max
            for cell in itertools.product(*(range(a, z + 1) for a, z in zip(lo, hi))):
                assert cell not in seen
                seen.add(cell)
        assert len(seen) == 64

    def test_non_divisible_rejected(self):
        with pytest.raises(DecompositionError):
            decompose_domain((5, 4, 4), (2, 2, 2))

    def test_predicate_keeps_selection(self):
        keep = lambda iv: iv.min[0] == 0
        blocks = decompose_domain((4, 4, 4), (2, 2, 2), keep)
        assert len(blocks) == 4
        assert all(b.global_interval.min[0] == 0 for b in blocks)


class _FakeBlock:
    def __init__(self, bid, weight):
        self.id = bid
        self.weight = weight


def _loads(blocks, assignment, workers):
    loads = [0.0] * workers
    for b in blocks:
        loads[assignment[b.id]] += b.weight
    return loads


class TestAssign:
    def test_equal_weights_spread(self):
        blocks = [_FakeBlock(i, 1.0) for i in range(3)]
        assignment = assign_blocks(blocks, 3)
        assert sorted(assignment.values()) == [0, 1, 2]

    def test_documented_example(self):
        # brute force over all 2^4 assignments confirms the optimum is {6, 6}
        weights = [4.0, 3.0, 3.0, 2.0]
        blocks = [_FakeBlock(i, w) for i, w in enumerate(weights)]
        best = min(max(sum(w for w, pick in zip(weights, choice) if pick == wid)
                       for wid in (0, 1))
                   for choice in itertools.product((0, 1), repeat=4))
        assert best == 6.0
        loads = _loads(blocks, assign_blocks(blocks, 2), 2)
        assert sorted(loads) == [6.0, 6.0]

    def test_lpt_bound_against_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            n = int(rng.integers(1, 9))
            workers = int(rng.integers(1, 4))
            weights = rng.integers(1, 20, size=n).astype(float)
            blocks = [_FakeBlock(i, w) for i, w in enumerate(weights)]
            lpt = max(_loads(blocks, assign_blocks(blocks, workers), workers))
            opt = min(
                max(sum(w for w, pick in zip(weights, choice) if pick == wid)
                    for wid in range(workers))
                for choice in itertools.product(range(workers), repeat=n))
            assert opt <= lpt <= 2.0 * opt

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        weights = rng.random(6)
        a1 = assign_blocks([_FakeBlock(i, w) for i, w in enumerate(weights)], 3)
        a2 = assign_blocks([_FakeBlock(i, w) for i, w in enumerate(weights)], 3)
        assert a1 == a2

    def test_weight_fn_overrides(self):
        blocks = [_FakeBlock(0, 1.0), _FakeBlock(1, 1.0)]
        assignment = assign_blocks(blocks, 2, weight_fn=lambda b: 10.0 if b.id else 1.0)
        assert blocks[1].weight == 10.0
        assert assignment[1] == 0  # heaviest goes first, onto worker 0


class TestStorage:
    def test_single_worker_owns_all(self):
        storage = make_storage((4, 4, 4), (2, 2, 2), worker_count=1)
        assert len(storage.local_blocks(0)) == 8

    def test_partition_property(self):
        storage = make_storage((4, 4, 4), (2, 2, 2), worker_count=3)
        union = []
        for wid in range(3):
            union.extend(b.id for b in storage.local_blocks(wid))
        assert sorted(union) == sorted(storage.blocks)

    def test_unknown_worker_rejected(self):
        storage = make_storage((4, 4, 4), (2, 2, 2), worker_count=2)
        with pytest.raises(DecompositionError):
            storage.local_blocks(17)

    def test_cell_count_reports_global_extents(self):
        storage = make_storage((300, 100, 100), (100, 100, 100))
        assert storage.cell_count() == (300, 100, 100)
        storage2 = make_storage((4, 4, 4), (2, 2, 2))
        assert storage2.cell_count() == (4, 4, 4)

    def test_cell_count_unchanged_by_discarding(self):
        storage = make_storage((4, 4, 4), (2, 2, 2),
                               keep_predicate=lambda iv: iv.min[0] == 0)
        assert storage.cell_count() == (4, 4, 4)

    def test_field_lookup_by_name(self):
        storage = make_storage((4, 4, 4), (4, 4, 4))
        block = storage.local_blocks(0)[0]
        block.add_field("velocity", f_size=3, ghost_layers=1)
        assert block["velocity"].requested_size == (4, 4, 4, 3)


def test_fluid_cell_weighting():
    # weight proportional to the number of fluid cells: blocks overlapping a
    # solid half-space carry half the weight
    from blockforge.blockgrid import make_storage

    def fluid_cells(block):
        lo, hi = block.global_interval.min, block.global_interval.max
        count = 0
        for x in range(lo[0], hi[0] + 1):
            count += (hi[1] - lo[1] + 1) * (hi[2] - lo[2] + 1) if x < 6 else 0
        return max(count, 1)

    storage = make_storage((8, 4, 4), (2, 4, 4), worker_count=2,
                           weight_fn=fluid_cells)
    weights = {bid: b.weight for bid, b in storage.blocks.items()}
    assert weights[0] == weights[1] == weights[2] == 32.0
    assert weights[3] == 1.0
    loads = {}
    for bid, wid in storage.assignment.items():
        loads[wid] = loads.get(wid, 0.0) + weights[bid]
    assert abs(loads[0] - loads[1]) <= 32.0  # LPT keeps the split balanced
