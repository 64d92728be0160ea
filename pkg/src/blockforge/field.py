"""4D cell-data container with configurable memory layout.

A :class:`Field` stores one 64-bit float per (x, y, z, f) coordinate in a
single contiguous buffer.  Spatial extents can be surrounded by ghost layers,
and the innermost spatial extent may be padded so that each line starts on an
aligned address (SoA layout only).  Views and exported array descriptors
alias the buffer; no cell data is ever copied by this module.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

ELEMENT_BYTES = 8  # float64 only


class FieldLayout(enum.Enum):
    AOS = "aos"  # f varies fastest
    SOA = "soa"  # x varies fastest, one spatial brick per f


class FieldError(ValueError):
    pass


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


class Field:
    """Owns the buffer plus the size/layout metadata needed to address it.

    ``requested_size`` is what callers asked for; ``allocated_size`` includes
    ghost layers and (for SoA) alignment padding of the x extent.  Interior
    coordinates run from 0, ghost cells are addressed with negative or
    overflowing spatial coordinates.
    """

    def __init__(self, name, requested_size, ghost_layers, layout, alignment,
                 allocated_size, data):
        self.name = name
        self.requested_size = tuple(requested_size)
        self.ghost_layers = ghost_layers
        self.layout = layout
        self.alignment = alignment
        self.allocated_size = tuple(allocated_size)
        self.data = data  # 1D float64 buffer, length == prod(allocated_size)

    # -- addressing ---------------------------------------------------------

    def strides_elements(self):
        """Per-coordinate strides (x, y, z, f) in elements."""
        ax, ay, az, af = self.allocated_size
        if self.layout is FieldLayout.AOS:
            return (af, ax * af, ay * ax * af, 1)
        return (1, ax, ay * ax, az * ay * ax)

    def element_index(self, x, y, z, f):
        """Buffer offset of one cell value; ghost cells use negative/overflow coords."""
        g = self.ghost_layers
        rx, ry, rz, rf = self.requested_size
        if not (-g <= x < rx + g and -g <= y < ry + g and -g <= z < rz + g):
            raise FieldError(
                f"coordinate ({x},{y},{z}) outside [-{g}, requested+{g}) of field '{self.name}'")
        if not 0 <= f < rf:
            raise FieldError(f"f index {f} outside [0, {rf}) of field '{self.name}'")
        sx, sy, sz, sf = self.strides_elements()
        return (x + g) * sx + (y + g) * sy + (z + g) * sz + f * sf

    def get(self, x, y, z, f):
        return float(self.data[self.element_index(x, y, z, f)])

    def set(self, x, y, z, f, value):
        self.data[self.element_index(x, y, z, f)] = value

    # -- ndarray aliases ----------------------------------------------------

    def _ndarray(self, origin, shape, writable=True):
        offset = self.element_index(*origin) * ELEMENT_BYTES
        strides = tuple(s * ELEMENT_BYTES for s in self.strides_elements())
        arr = np.ndarray(shape, dtype=np.float64, buffer=self.data,
                         offset=offset, strides=strides)
        if not writable:
            arr.flags.writeable = False
        return arr

    def interior_view(self, writable=True):
        """(x, y, z, f) ndarray over the requested region, ghosts excluded."""
        return self._ndarray((0, 0, 0, 0), self.requested_size, writable)

    def full_view(self, writable=True):
        """(x, y, z, f) ndarray over requested + ghost region (padding excluded)."""
        g = self.ghost_layers
        rx, ry, rz, rf = self.requested_size
        shape = (rx + 2 * g, ry + 2 * g, rz + 2 * g, rf)
        return self._ndarray((-g, -g, -g, 0), shape, writable)

    def __repr__(self):
        return (f"Field({self.name!r}, requested={self.requested_size}, "
                f"ghosts={self.ghost_layers}, layout={self.layout.value}, "
                f"allocated={self.allocated_size})")


@dataclass
class FieldView:
    """Rectangular window into a field; shares the parent's buffer and strides."""

    parent: Field
    offset: tuple  # 4 ints, in parent interior coordinates (ghosts may be negative)
    size: tuple    # 4 positive ints
    strides: tuple  # element strides, equal to the parent's

    def element_index(self, x, y, z, f):
        for c, n in zip((x, y, z, f), self.size):
            if not 0 <= c < n:
                raise FieldError(f"view coordinate {(x, y, z, f)} outside size {self.size}")
        ox, oy, oz, of = self.offset
        return self.parent.element_index(x + ox, y + oy, z + oz, f + of)

    def get(self, x, y, z, f):
        return float(self.parent.data[self.element_index(x, y, z, f)])

    def set(self, x, y, z, f, value):
        self.parent.data[self.element_index(x, y, z, f)] = value

    def ndarray(self, writable=True):
        return self.parent._ndarray(self.offset, self.size, writable)


@dataclass
class ArrayViewDescriptor:
    """Zero-copy description of a field or view: enough to address every cell.

    ``base_offset`` and ``strides_bytes`` are in bytes relative to the start
    of the owning buffer; ``field`` is the owner whose buffer the descriptor
    aliases (it must stay alive while the descriptor is used).
    """

    base_offset: int
    shape: tuple
    strides_bytes: tuple
    element_kind: str
    writable: bool
    field: Field

    def ndarray(self):
        """Materialize the described window; writes go straight to the field."""
        arr = np.ndarray(self.shape, dtype=np.float64, buffer=self.field.data,
                         offset=self.base_offset, strides=self.strides_bytes)
        if not self.writable:
            arr.flags.writeable = False
        return arr


def create_field(name, requested_size, ghost_layers=0, layout=FieldLayout.AOS,
                 alignment=8):
    """Allocate a zero-initialized field.

    SoA layouts pad the allocated x extent up to the next multiple of
    ``alignment / 8`` doubles so each (y, z, f) line starts aligned; AoS
    layouts never pad.
    """
    requested_size = tuple(int(v) for v in requested_size)
    if len(requested_size) != 4 or any(v < 1 for v in requested_size):
        raise FieldError(f"requested_size must be 4 positive extents, got {requested_size}")
    if ghost_layers < 0:
        raise FieldError("ghost_layers must be non-negative")
    if alignment < 8 or not _is_power_of_two(alignment):
        raise FieldError(f"alignment must be a power of two >= 8, got {alignment}")
    layout = FieldLayout(layout)

    g = ghost_layers
    rx, ry, rz, rf = requested_size
    ax, ay, az = rx + 2 * g, ry + 2 * g, rz + 2 * g
    if layout is FieldLayout.SOA:
        line = alignment // ELEMENT_BYTES
        ax = ((ax + line - 1) // line) * line
    allocated = (ax, ay, az, rf)
    data = np.zeros(ax * ay * az * rf, dtype=np.float64)
    return Field(name, requested_size, g, layout, alignment, allocated, data)


def view_slice(field: Field, interval, include_ghosts=False) -> FieldView:
    """Half-open-interval window ``((x0,x1),(y0,y1),(z0,z1),(f0,f1))`` into a field."""
    if len(interval) != 4:
        raise FieldError("interval must give 4 half-open ranges")
    g = field.ghost_layers if include_ghosts else 0
    offset, size = [], []
    for d, (lo, hi) in enumerate(interval):
        lo, hi = int(lo), int(hi)
        n = field.requested_size[d]
        lo_bound = -g if d < 3 else 0
        hi_bound = n + g if d < 3 else n
        if not (lo_bound <= lo < hi <= hi_bound):
            raise FieldError(
                f"interval {interval[d]} empty or outside [{lo_bound}, {hi_bound}) on axis {d}")
        offset.append(lo)
        size.append(hi - lo)
    return FieldView(field, tuple(offset), tuple(size), field.strides_elements())


def export_array_view(obj, writable=True) -> ArrayViewDescriptor:
    """Describe a field or view for zero-copy array access."""
    if isinstance(obj, Field):
        parent, origin, shape = obj, (0, 0, 0, 0), obj.requested_size
    elif isinstance(obj, FieldView):
        parent, origin, shape = obj.parent, obj.offset, obj.size
    else:
        raise FieldError(f"cannot export {type(obj).__name__} as an array view")
    base = parent.element_index(*origin) * ELEMENT_BYTES
    strides = tuple(s * ELEMENT_BYTES for s in parent.strides_elements())
    return ArrayViewDescriptor(base, tuple(shape), strides, "float64", writable, parent)


def swap_buffers(a: Field, b: Field):
    """Exchange the two fields' buffers in O(1); no elements are copied."""
    same = (a.requested_size == b.requested_size
            and a.ghost_layers == b.ghost_layers
            and a.layout is b.layout
            and a.alignment == b.alignment)
    if not same:
        raise FieldError(
            f"cannot swap mismatched fields '{a.name}' and '{b.name}': "
            f"{a.requested_size}/g{a.ghost_layers}/{a.layout.value} vs "
            f"{b.requested_size}/g{b.ghost_layers}/{b.layout.value}")
    a.data, b.data = b.data, a.data
