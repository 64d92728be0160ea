"""Lattice Boltzmann core: stencils, TRT collision, pull streaming, boundaries.

All kernels are elementwise with a fixed per-cell operation order, so a run
partitioned into many blocks on many workers is bit-identical to a single
block run once ghost layers are synchronized.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .comms import exchange_ghost_layers
from .field import swap_buffers

# cell state codes stored in the float64 'flags' field
FLUID = 0.0
NOSLIP = 1.0
PRESSURE = 2.0
VELOCITY = 3.0
GAS = 4.0
INTERFACE = 5.0
OBSTACLE = 6.0

REFERENCE_DENSITY = 1.0


class LbmError(ValueError):
    pass


class Stencil:
    """Discrete velocity set: directions, weights, and the opposite mapping."""

    def __init__(self, kind, directions, weights_exact):
        self.kind = kind
        self.Q = len(directions)
        self.e = np.array(directions, dtype=np.int64)
        self.w_exact = [Fraction(*w) for w in weights_exact]
        self.w = np.array([float(w) for w in self.w_exact], dtype=np.float64)
        self.opp = np.empty(self.Q, dtype=np.int64)
        index = {tuple(d): i for i, d in enumerate(directions)}
        for i, d in enumerate(directions):
            self.opp[i] = index[tuple(-c for c in d)]

    def __repr__(self):
        return f"Stencil({self.kind}, Q={self.Q})"


_D3Q19_DIRS = [
    (0, 0, 0),
    (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
    (1, 1, 0), (-1, -1, 0), (1, -1, 0), (-1, 1, 0),
    (1, 0, 1), (-1, 0, -1), (1, 0, -1), (-1, 0, 1),
    (0, 1, 1), (0, -1, -1), (0, 1, -1), (0, -1, 1),
]
_D3Q19_W = [(1, 3)] + [(1, 18)] * 6 + [(1, 36)] * 12

_D2Q9_DIRS = [
    (0, 0, 0),
    (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0),
    (1, 1, 0), (-1, -1, 0), (1, -1, 0), (-1, 1, 0),
]
_D2Q9_W = [(4, 9)] + [(1, 9)] * 4 + [(1, 36)] * 4


def make_stencil(kind) -> Stencil:
    if kind == "D3Q19":
        return Stencil(kind, _D3Q19_DIRS, _D3Q19_W)
    if kind == "D2Q9":
        return Stencil(kind, _D2Q9_DIRS, _D2Q9_W)
    raise LbmError(f"unknown stencil kind {kind!r}")


class TRTParams:
    """Two-relaxation-time rates tied together by the magic parameter."""

    def __init__(self, omega_even, omega_odd, magic, viscosity):
        if not 0.0 < omega_even < 2.0:
            raise LbmError(f"omega_even {omega_even} outside (0, 2)")
        if not 0.0 < omega_odd < 2.0:
            raise LbmError(f"omega_odd {omega_odd} outside (0, 2)")
        if magic <= 0.0:
            raise LbmError(f"magic parameter must be positive, got {magic}")
        self.omega_even = omega_even
        self.omega_odd = omega_odd
        self.magic = magic
        self.viscosity = viscosity

    @classmethod
    def from_viscosity(cls, nu, magic=3.0 / 16.0):
        if nu <= 0.0:
            raise LbmError(f"lattice viscosity must be positive, got {nu}")
        omega_even = 1.0 / (3.0 * nu + 0.5)
        return cls.from_omega(omega_even, magic)

    @classmethod
    def from_omega(cls, omega_even, magic=3.0 / 16.0):
        half_even = 1.0 / omega_even - 0.5
        nu = half_even / 3.0
        omega_odd = 1.0 / (magic / half_even + 0.5)
        return cls(omega_even, omega_odd, magic, nu)

    def __repr__(self):
        return (f"TRTParams(omega_even={self.omega_even:.6g}, "
                f"omega_odd={self.omega_odd:.6g}, magic={self.magic:.6g})")


def equilibrium(rho, u, stencil: Stencil):
    """Second-order equilibrium f_eq = w rho (1 + 3eu + 4.5(eu)^2 - 1.5u^2)."""
    rho = np.asarray(rho, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    ux, uy, uz = u[..., 0], u[..., 1], u[..., 2]
    usq = ux * ux + uy * uy + uz * uz
    out = np.empty(rho.shape + (stencil.Q,), dtype=np.float64)
    for a in range(stencil.Q):
        ex, ey, ez = stencil.e[a]
        eu = ex * ux + ey * uy + ez * uz
        out[..., a] = stencil.w[a] * rho * (1.0 + 3.0 * eu + 4.5 * eu * eu - 1.5 * usq)
    return out


def macroscopic(f, stencil: Stencil):
    """Density and velocity moments of the PDFs; raises on rho <= 0."""
    f = np.asarray(f, dtype=np.float64)
    rho, flux = _moments(f, stencil)
    if np.any(rho <= 0.0):
        raise LbmError("non-positive density: invalid flow state")
    u = np.empty(rho.shape + (3,), dtype=np.float64)
    for i in range(3):
        u[..., i] = flux[i] / rho
    return rho, u


def _moments(f, stencil):
    """Zeroth and first moments with a fixed accumulation order."""
    rho = f[..., 0].astype(np.float64, copy=True)
    for a in range(1, stencil.Q):
        rho += f[..., a]
    flux = [np.zeros_like(rho) for _ in range(3)]
    for a in range(1, stencil.Q):
        for i in range(3):
            c = stencil.e[a, i]
            if c == 1:
                flux[i] += f[..., a]
            elif c == -1:
                flux[i] -= f[..., a]
    return rho, flux


def trt_collide(f, params: TRTParams, stencil: Stencil, rho=None, u=None):
    """Post-collision PDFs; even/odd parity parts relax at separate rates."""
    f = np.asarray(f, dtype=np.float64)
    if rho is None or u is None:
        rho, u = macroscopic(f, stencil)
    feq = equilibrium(rho, u, stencil)
    out = np.empty_like(f)
    we, wo = params.omega_even, params.omega_odd
    out[..., 0] = f[..., 0] - we * (f[..., 0] - feq[..., 0])
    for a in range(1, stencil.Q):
        b = int(stencil.opp[a])
        if b < a:
            continue
        fa, fb = f[..., a], f[..., b]
        qa, qb = feq[..., a], feq[..., b]
        even = 0.5 * (fa + fb)
        odd = 0.5 * (fa - fb)
        eq_even = 0.5 * (qa + qb)
        eq_odd = 0.5 * (qa - qb)
        d_even = we * (even - eq_even)
        d_odd = wo * (odd - eq_odd)
        out[..., a] = fa - d_even - d_odd
        out[..., b] = fb - d_even + d_odd
    return out


# -- block-level kernels ------------------------------------------------------

def upstream_view(full, e, g, interior_shape):
    """View of cell x - e for every interior cell x (full = ghost-inclusive array)."""
    nx, ny, nz = interior_shape
    return full[g - e[0]: g - e[0] + nx,
                g - e[1]: g - e[1] + ny,
                g - e[2]: g - e[2] + nz]


def downstream_view(full, e, g, interior_shape):
    """View of cell x + e for every interior cell x."""
    return upstream_view(full, (-e[0], -e[1], -e[2]), g, interior_shape)


class StreamMasks:
    """Per-direction upstream-flag classification for one block.

    Rebuilt whenever the flag field changes; static flags (pure LBM) build it
    once.  All-true masks are flagged so the kernels can skip the masked
    select on homogeneous blocks.
    """

    def __init__(self, block, stencil: Stencil):
        flags_field = block.fields["flags"]
        g = flags_field.ghost_layers
        flags_full = flags_field.full_view()[..., 0]
        flags_in = flags_field.interior_view()[..., 0]
        shape = flags_in.shape
        self.solve = (flags_in == FLUID) | (flags_in == INTERFACE)
        self.all_solve = bool(self.solve.all())
        self.stream = {}
        self.stream_full = {}
        self.noslip = {}
        self.pressure = {}
        self.velocity = {}
        self.carry = {}
        self.has_noslip = {}
        self.has_pressure = {}
        self.has_velocity = {}
        self.has_carry = {}
        for a in range(1, stencil.Q):
            up = upstream_view(flags_full, stencil.e[a], g, shape)
            self.stream[a] = self.solve & ((up == FLUID) | (up == INTERFACE))
            self.stream_full[a] = bool(self.stream[a].all())
            self.noslip[a] = self.solve & (up == NOSLIP)
            self.pressure[a] = self.solve & (up == PRESSURE)
            self.velocity[a] = self.solve & (up == VELOCITY)
            self.carry[a] = self.solve & ((up == GAS) | (up == OBSTACLE))
            self.has_noslip[a] = bool(self.noslip[a].any())
            self.has_pressure[a] = bool(self.pressure[a].any())
            self.has_velocity[a] = bool(self.velocity[a].any())
            self.has_carry[a] = bool(self.carry[a].any())
        self.any_pressure = any(self.has_pressure.values())
        self.any_velocity = any(self.has_velocity.values())


def collide_block(block, params, stencil, masks: StreamMasks):
    """TRT collision in place on the block's pdf field.

    All cells collide unconditionally: non-solve cells' PDF entries are never
    read anywhere (boundaries use the fluid cell's own values plus the bc
    fields, gas cells are reconstructed), so masking would only cost time.
    Slice-wise over direction pairs so the SoA pdf layout keeps every
    operand unit-stride; the arithmetic matches :func:`trt_collide`
    expression for expression.
    """
    pdf = block.fields["pdf"].interior_view()
    we, wo = params.omega_even, params.omega_odd
    with np.errstate(all="ignore"):
        rho, flux = _moments(pdf, stencil)
        ux = flux[0] / rho
        uy = flux[1] / rho
        uz = flux[2] / rho
        usq = ux * ux + uy * uy + uz * uz
        block._moment_cache = (rho, ux, uy, uz, usq)

        f0 = pdf[..., 0]
        feq0 = stencil.w[0] * rho * (1.0 - 1.5 * usq)
        pdf[..., 0] = f0 - we * (f0 - feq0)
        for a in range(1, stencil.Q):
            b = int(stencil.opp[a])
            if b < a:
                continue
            ex, ey, ez = stencil.e[a]
            eu = ex * ux + ey * uy + ez * uz
            qa = stencil.w[a] * rho * (1.0 + 3.0 * eu + 4.5 * eu * eu - 1.5 * usq)
            qb = stencil.w[b] * rho * (1.0 - 3.0 * eu + 4.5 * eu * eu - 1.5 * usq)
            fa = pdf[..., a]
            fb = pdf[..., b]
            even = 0.5 * (fa + fb)
            odd = 0.5 * (fa - fb)
            eq_even = 0.5 * (qa + qb)
            eq_odd = 0.5 * (qa - qb)
            d_even = we * (even - eq_even)
            d_odd = wo * (odd - eq_odd)
            pdf[..., a] = fa - d_even - d_odd
            pdf[..., b] = fb - d_even + d_odd


def stream_block(block, stencil, masks: StreamMasks):
    """Pull streaming from pdf into pdf_tmp for streamable upstream links.

    Gas/obstacle upstream links carry the cell's own post-collision value
    forward; the free-surface reconstruction replaces them before use.
    """
    src_field = block.fields["pdf"]
    g = src_field.ghost_layers
    src_full = src_field.full_view()
    src_in = src_field.interior_view()
    dst = block.fields["pdf_tmp"].interior_view()
    shape = src_in.shape[:3]
    if masks.all_solve:
        dst[..., 0] = src_in[..., 0]
    else:
        dst[..., 0] = np.where(masks.solve, src_in[..., 0], dst[..., 0])
    for a in range(1, stencil.Q):
        up = upstream_view(src_full[..., a], stencil.e[a], g, shape)
        if masks.stream_full[a]:
            dst[..., a] = up
        else:
            dst[..., a] = np.where(masks.stream[a], up, dst[..., a])
        if masks.has_carry[a]:
            dst[..., a] = np.where(masks.carry[a], src_in[..., a], dst[..., a])


def apply_boundaries(block, stencil, masks: StreamMasks):
    """Write boundary-link PDFs into pdf_tmp.

    No-slip: halfway bounce-back.  Pressure: anti-bounce-back against the
    wall density with the cell's current velocity.  Velocity: bounce-back
    with a momentum correction toward the wall velocity.
    """
    src_field = block.fields["pdf"]
    g = src_field.ghost_layers
    src_in = src_field.interior_view()
    dst = block.fields["pdf_tmp"].interior_view()
    shape = src_in.shape[:3]

    if masks.any_pressure:
        # collision leaves the macroscopic moments unchanged, so the cached
        # pre-collision velocity is the cell's current velocity
        cache = getattr(block, "_moment_cache", None)
        if cache is not None:
            _, ux, uy, uz, usq = cache
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                rho, flux = _moments(src_in, stencil)
                ux, uy, uz = (flux[i] / rho for i in range(3))
                usq = ux * ux + uy * uy + uz * uz

    bc_rho_full = block.fields["bc_rho"].full_view()[..., 0] if masks.any_pressure else None
    bc_vel_full = block.fields["bc_vel"].full_view() if masks.any_velocity else None

    for a in range(1, stencil.Q):
        b = int(stencil.opp[a])
        if masks.has_noslip[a]:
            m = masks.noslip[a]
            dst[..., a] = np.where(m, src_in[..., b], dst[..., a])
        if masks.has_pressure[a]:
            m = masks.pressure[a]
            ex, ey, ez = stencil.e[a]
            rho_w = upstream_view(bc_rho_full, stencil.e[a], g, shape)
            eu = ex * ux + ey * uy + ez * uz
            # anti-bounce-back imposes the even (pressure) equilibrium part;
            # the odd term would re-inject momentum and destabilize the wall
            feq_even = stencil.w[a] * rho_w * (1.0 + 4.5 * eu * eu - 1.5 * usq)
            dst[..., a] = np.where(m, -src_in[..., b] + 2.0 * feq_even, dst[..., a])
        if masks.has_velocity[a]:
            m = masks.velocity[a]
            ex, ey, ez = stencil.e[a]
            uw = upstream_view(bc_vel_full, stencil.e[a], g, shape)
            euw = ex * uw[..., 0] + ey * uw[..., 1] + ez * uw[..., 2]
            corr = 6.0 * stencil.w[a] * REFERENCE_DENSITY * euw
            dst[..., a] = np.where(m, src_in[..., b] + corr, dst[..., a])


def update_macroscopic_fields(block, stencil):
    """Refresh the block's density/velocity output fields from the pdf field."""
    pdf = block.fields["pdf"].interior_view()
    flags = block.fields["flags"].interior_view()[..., 0]
    solve = (flags == FLUID) | (flags == INTERFACE)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho, flux = _moments(pdf, stencil)
        dens = block.fields["density"].interior_view()[..., 0]
        vel = block.fields["velocity"].interior_view()
        dens[...] = np.where(solve, rho, 0.0)
        for i in range(3):
            vel[..., i] = np.where(solve, flux[i] / rho, 0.0)


def setup_lbm_fields(block, stencil: Stencil, fill_ghosts=1):
    """Create the standard per-block field set (pdf double buffer + state).

    The pdf buffers use the SoA layout: the kernels sweep one direction at a
    time, so unit-stride per-direction slabs dominate the run time.
    """
    from .field import FieldLayout
    block.add_field("pdf", f_size=stencil.Q, ghost_layers=1,
                    layout=FieldLayout.SOA)
    block.add_field("pdf_tmp", f_size=stencil.Q, ghost_layers=1,
                    layout=FieldLayout.SOA)
    block.add_field("flags", f_size=1, ghost_layers=max(1, fill_ghosts))
    block.add_field("bc_rho", f_size=1, ghost_layers=1)
    block.add_field("bc_vel", f_size=3, ghost_layers=1)
    block.add_field("velocity", f_size=3, ghost_layers=1)
    block.add_field("density", f_size=1, ghost_layers=1)


def lbm_timestep(storage, params, stencil, plan, transport, masks_by_block,
                 update_outputs=True):
    """One collide / exchange / stream+boundaries / swap cycle on local blocks.

    ``update_outputs=False`` skips refreshing the density/velocity fields;
    callers that neither evaluate nor write output this step save a pass.
    """
    local = storage.local_blocks(transport.self_id)
    for block in local:
        collide_block(block, params, stencil, masks_by_block[block.id])
    exchange_ghost_layers(plan, ["pdf"], transport)
    for block in local:
        masks = masks_by_block[block.id]
        stream_block(block, stencil, masks)
        apply_boundaries(block, stencil, masks)
    for block in local:
        swap_buffers(block.fields["pdf"], block.fields["pdf_tmp"])
        if update_outputs:
            update_macroscopic_fields(block, stencil)
