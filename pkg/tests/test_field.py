import numpy as np
import pytest

from blockforge.field import (FieldError, FieldLayout, create_field,
                              export_array_view, swap_buffers, view_slice)


class TestCreate:
    def test_aos_ghosts_no_padding(self):
        f = create_field("pdf", (4, 4, 4, 19), ghost_layers=1,
                         layout=FieldLayout.AOS, alignment=8)
        assert f.allocated_size == (6, 6, 6, 19)

    def test_soa_padding_rounds_up(self):
        f = create_field("v", (10, 4, 4, 1), ghost_layers=0,
                         layout=FieldLayout.SOA, alignment=32)
        assert f.allocated_size[0] == 12

    def test_buffer_length_is_allocated_product(self):
        f = create_field("v", (2, 2, 2, 2))
        assert f.data.size == 16

    def test_zero_initialized(self):
        f = create_field("v", (3, 2, 2, 1), ghost_layers=1)
        assert not f.data.any()

    @pytest.mark.parametrize("size", [(0, 1, 1, 1), (1, -2, 1, 1), (1, 1, 1, 0)])
    def test_rejects_bad_extents(self, size):
        with pytest.raises(FieldError):
            create_field("v", size)

    @pytest.mark.parametrize("alignment", [7, 12, 0, 4])
    def test_rejects_bad_alignment(self, alignment):
        with pytest.raises(FieldError):
            create_field("v", (2, 2, 2, 1), alignment=alignment)


class TestElementIndex:
    def test_aos_formula(self):
        f = create_field("v", (2, 2, 2, 2))
        assert f.element_index(1, 0, 0, 1) == 3

    def test_first_ghost_cell_is_offset_zero(self):
        f = create_field("v", (4, 4, 4, 19), ghost_layers=1)
        assert f.element_index(-1, -1, -1, 0) == 0

    def test_out_of_range_rejected(self):
        f = create_field("v", (2, 2, 2, 2), ghost_layers=1)
        with pytest.raises(FieldError):
            f.element_index(3, 0, 0, 0)
        with pytest.raises(FieldError):
            f.element_index(0, 0, 0, 2)

    @pytest.mark.parametrize("layout,alignment", [
        (FieldLayout.AOS, 8), (FieldLayout.SOA, 8),
        (FieldLayout.AOS, 64), (FieldLayout.SOA, 64),
    ])
    def test_bijection_over_valid_coords(self, layout, alignment):
        f = create_field("v", (3, 3, 3, 2), ghost_layers=1,
                         layout=layout, alignment=alignment)
        g = f.ghost_layers
        seen = set()
        for x in range(-g, 3 + g):
            for y in range(-g, 3 + g):
                for z in range(-g, 3 + g):
                    for q in range(2):
                        idx = f.element_index(x, y, z, q)
                        assert 0 <= idx < f.data.size
                        assert idx not in seen
                        seen.add(idx)

    def test_soa_and_aos_enumerate_same_offsets(self):
        # brute-force enumeration over every coordinate of a 3x3x3x2 field
        fa = create_field("a", (3, 3, 3, 2), layout=FieldLayout.AOS)
        fs = create_field("s", (3, 3, 3, 2), layout=FieldLayout.SOA)
        coords = [(x, y, z, q) for x in range(3) for y in range(3)
                  for z in range(3) for q in range(2)]
        offs_a = sorted(fa.element_index(*c) for c in coords)
        offs_s = sorted(fs.element_index(*c) for c in coords)
        assert offs_a == offs_s == list(range(54))


class TestViews:
    def test_full_range_slice_matches_field(self):
        f = create_field("v", (4, 3, 2, 2))
        v = view_slice(f, ((0, 4), (0, 3), (0, 2), (0, 2)))
        assert v.size == f.requested_size
        assert v.strides == f.strides_elements()

    def test_view_aliases_parent(self):
        f = create_field("v", (4, 4, 4, 1))
        v = view_slice(f, ((1, 3), (1, 3), (1, 3), (0, 1)))
        v.set(0, 0, 0, 0, 7.0)
        assert f.get(1, 1, 1, 0) == 7.0
        f.set(2, 2, 2, 0, -1.0)
        assert v.get(1, 1, 1, 0) == -1.0

    def test_line_slice_shape(self):
        f = create_field("v", (8, 8, 8, 2))
        v = view_slice(f, ((4, 5), (4, 5), (0, 8), (0, 1)))
        assert v.size == (1, 1, 8, 1)

    def test_empty_or_out_of_range_rejected(self):
        f = create_field("v", (4, 4, 4, 1))
        with pytest.raises(FieldError):
            view_slice(f, ((2, 2), (0, 4), (0, 4), (0, 1)))
        with pytest.raises(FieldError):
            view_slice(f, ((0, 5), (0, 4), (0, 4), (0, 1)))

    def test_ghost_addressable_when_flagged(self):
        f = create_field("v", (4, 4, 4, 1), ghost_layers=1)
        with pytest.raises(FieldError):
            view_slice(f, ((-1, 4), (0, 4), (0, 4), (0, 1)))
        v = view_slice(f, ((-1, 5), (0, 4), (0, 4), (0, 1)), include_ghosts=True)
        assert v.size == (6, 4, 4, 1)


class TestArrayExport:
    def test_aos_shape_and_innermost_stride(self):
        f = create_field("pdf", (2, 2, 2, 19))
        d = export_array_view(f)
        assert d.shape == (2, 2, 2, 19)
        assert d.strides_bytes[3] == 8
        assert d.element_kind == "float64"

    def test_descriptor_matches_element_index_oracle(self):
        # padded SoA field: every descriptor address equals the index formula
        f = create_field("v", (5, 3, 2, 2), ghost_layers=1,
                         layout=FieldLayout.SOA, alignment=64)
        d = export_array_view(f)
        for x in range(5):
            for y in range(3):
                for z in range(2):
                    for q in range(2):
                        addr = d.base_offset + x * d.strides_bytes[0] \
                            + y * d.strides_bytes[1] + z * d.strides_bytes[2] \
                            + q * d.strides_bytes[3]
                        assert addr == f.element_index(x, y, z, q) * 8

    def test_zero_copy_round_trip(self):
        f = create_field("v", (3, 4, 2, 2), ghost_layers=1,
                         layout=FieldLayout.SOA, alignment=32)
        value = 0.0
        for x in range(3):
            for y in range(4):
                for z in range(2):
                    for q in range(2):
                        f.set(x, y, z, q, value)
                        value += 1.0
        arr = export_array_view(f).ndarray()
        expect = np.arange(48.0).reshape(3, 4, 2, 2)
        np.testing.assert_array_equal(arr, expect)
        arr[1, 1, 1, 1] = -5.0
        assert f.get(1, 1, 1, 1) == -5.0

    def test_readonly_descriptor_rejects_writes(self):
        f = create_field("v", (2, 2, 2, 1))
        arr = export_array_view(f, writable=False).ndarray()
        with pytest.raises(ValueError):
            arr[0, 0, 0, 0] = 1.0

    def test_padding_does_not_change_values(self):
        rng = np.random.default_rng(7)
        values = rng.random((4, 3, 3, 2))
        results = []
        for alignment in (8, 64):
            f = create_field("v", (4, 3, 3, 2), ghost_layers=1,
                             layout=FieldLayout.SOA, alignment=alignment)
            f.interior_view()[...] = values
            results.append(export_array_view(f).ndarray().copy())
        np.testing.assert_array_equal(results[0], results[1])


class TestSwap:
    def _pair(self):
        a = create_field("a", (2, 2, 2, 2), ghost_layers=1)
        b = create_field("b", (2, 2, 2, 2), ghost_layers=1)
        a.interior_view()[...] = 1.0
        b.interior_view()[...] = 2.0
        return a, b

    def test_swap_twice_restores(self):
        a, b = self._pair()
        before = a.interior_view().copy()
        swap_buffers(a, b)
        swap_buffers(a, b)
        np.testing.assert_array_equal(a.interior_view(), before)

    def test_swap_exchanges_contents(self):
        a, b = self._pair()
        swap_buffers(a, b)
        assert a.get(0, 0, 0, 0) == 2.0
        assert b.get(0, 0, 0, 0) == 1.0

    def test_earlier_views_alias_the_exchanged_buffer(self):
        a, b = self._pair()
        view_of_a = export_array_view(a).ndarray()
        swap_buffers(a, b)
        # the materialized view keeps the old memory, which now belongs to b
        np.testing.assert_array_equal(view_of_a, b.interior_view())

    def test_mismatched_fields_rejected(self):
        a = create_field("a", (2, 2, 2, 2))
        b = create_field("b", (2, 2, 2, 3))
        with pytest.raises(FieldError):
            swap_buffers(a, b)
