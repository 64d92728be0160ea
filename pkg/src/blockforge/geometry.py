"""Scenario-building helpers: border tests, sphere packing, rotated pipes."""

from __future__ import annotations

import math

import numpy as np


class GeometryError(ValueError):
    pass


_SIDE_AXES = {
    "W": (0, 0), "E": (0, 1),   # x min / max
    "S": (1, 0), "N": (1, 1),   # y min / max
    "B": (2, 0), "T": (2, 1),   # z min / max
}


def is_at_border(cell, domain_size, side) -> bool:
    """True when the cell lies on any of the named global faces.

    ``side`` is a string of face letters: W/E (x min/max), S/N (y min/max),
    B/T (z min/max); 'NSTB' matches any of the four lateral faces.
    """
    for letter in side:
        if letter not in _SIDE_AXES:
            raise GeometryError(f"unknown border letter {letter!r} (use W/E/N/S/T/B)")
        axis, end = _SIDE_AXES[letter]
        bound = domain_size[axis] - 1 if end else 0
        if cell[axis] == bound:
            return True
    return False


class SpherePack:
    """Hexagonal-close-packed equal spheres filling a box of cells."""

    def __init__(self, extents, radius, centers):
        self.extents = tuple(extents)
        self.radius = float(radius)
        self.centers = np.asarray(centers, dtype=np.float64)

    def overlap(self, cell) -> float:
        """Fraction of the unit cell cube inside any sphere (4x4x4 subsampling)."""
        return self._overlap(cell, samples=4)

    def _overlap(self, cell, samples):
        x, y, z = (float(c) for c in cell)
        r2 = self.radius * self.radius
        # only spheres within reach of the cell cube matter
        reach = self.radius + math.sqrt(3.0) / 2.0
        d = self.centers - np.array([x, y, z])
        near = self.centers[(np.abs(d) <= reach).all(axis=1)]
        if len(near) == 0:
            return 0.0
        step = 1.0 / samples
        offs = -0.5 + step * (np.arange(samples) + 0.5)
        sx, sy, sz = np.meshgrid(offs, offs, offs, indexing="ij")
        px = (x + sx).reshape(-1)
        py = (y + sy).reshape(-1)
        pz = (z + sz).reshape(-1)
        inside = np.zeros(px.shape, dtype=bool)
        for c in near:
            inside |= ((px - c[0]) ** 2 + (py - c[1]) ** 2 + (pz - c[2]) ** 2) <= r2
        return float(inside.sum()) / inside.size


def sphere_pack(nx, ny, nz, radius=None) -> SpherePack:
    """Dense packing of equal spheres over the whole (nx, ny, nz) domain.

    Centers sit on a hexagonal-close-packed lattice with spacing 2r, clipped
    so every sphere fits inside the domain.
    """
    if radius is None:
        radius = min(nx, ny, nz) / 8.0
    if radius < 2.0:
        raise GeometryError(f"sphere radius must be >= 2 cells, got {radius}")
    if 2.0 * radius > min(nx, ny, nz):
        raise GeometryError(
            f"radius {radius} too large for domain ({nx}, {ny}, {nz})")
    r = float(radius)
    dx = 2.0 * r
    dy = math.sqrt(3.0) * r
    dz = 2.0 * math.sqrt(6.0) / 3.0 * r
    centers = []
    k = 0
    z = r
    while z <= nz - r + 1e-9:
        j = 0
        y = r + (dy / 3.0 if k % 2 else 0.0)
        while y <= ny - r + 1e-9:
            x = r + (r if (j + k) % 2 else 0.0)
            while x <= nx - r + 1e-9:
                centers.append((x, y, z))
                x += dx
            j += 1
            y += dy
        k += 1
        z += dz
    if not centers:
        raise GeometryError("no sphere fits the domain")
    return SpherePack((nx, ny, nz), r, centers)


def _rotation_matrix(axis, degrees):
    c = math.cos(math.radians(degrees))
    s = math.sin(math.radians(degrees))
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
    raise GeometryError(f"unknown rotation axis {axis!r}")


class Pipe:
    """Cylinder with a no-slip shell, placed by a 4x4 world-to-object transform.

    In object coordinates the pipe axis is +z from 0 to ``length``;
    ``position`` is the world location of the inlet center.  ``rotate``
    composes a rotation about the world axis through the inlet.
    """

    def __init__(self, diameter, length, position, shell_thickness=1.0):
        if diameter <= 0 or length <= 0:
            raise GeometryError("pipe diameter and length must be positive")
        self.diameter = float(diameter)
        self.length = float(length)
        self.shell_thickness = float(shell_thickness)
        self.world_to_object = np.eye(4)
        self.world_to_object[:3, 3] = -np.asarray(position, dtype=np.float64)

    def rotate(self, degrees, axis="y"):
        """Rotate the pipe about the world axis through its inlet center."""
        rot = _rotation_matrix(axis, degrees)
        m = np.eye(4)
        m[:3, :3] = rot.T  # world->object uses the inverse rotation
        origin = self.world_to_object[:3, 3].copy()
        self.world_to_object[:3, 3] = 0.0
        self.world_to_object = m @ self.world_to_object
        self.world_to_object[:3, 3] += rot.T @ origin
        return self

    def _to_object(self, cell):
        p = np.array([cell[0], cell[1], cell[2], 1.0], dtype=np.float64)
        q = self.world_to_object @ p
        radial = math.hypot(q[0], q[1])
        return radial, q[2]

    def contains(self, cell) -> bool:
        radial, axial = self._to_object(cell)
        return radial < self.diameter / 2.0 and 0.0 <= axial <= self.length

    def shellContains(self, cell) -> bool:
        radial, axial = self._to_object(cell)
        return (self.diameter / 2.0 <= radial < self.diameter / 2.0 + self.shell_thickness
                and 0.0 <= axial <= self.length)

    def parabolicVel(self, cell, max_vel):
        """Velocity vector along the pipe axis with a parabolic radial profile."""
        radial, _ = self._to_object(cell)
        ratio = 2.0 * radial / self.diameter
        speed = max_vel * max(0.0, 1.0 - ratio * ratio)
        rot = self.world_to_object[:3, :3]
        axis_world = rot.T @ np.array([0.0, 0.0, 1.0])
        return tuple(speed * axis_world)

    # snake_case aliases
    shell_contains = shellContains
    parabolic_vel = parabolicVel


def make_pipe(diameter, length, position, shell_thickness=1.0) -> Pipe:
    return Pipe(diameter, length, position, shell_thickness)
