"""Physical quantities, lattice nondimensionalization, and config validation.

Quantities carry a magnitude and integer exponents over (length, mass, time).
They can be parsed from strings like ``"1e-6*m*m/s"`` or built by operator
algebra on the exported unit constants, and are converted to dimensionless
lattice numbers through a (dx, dt, rho0) scale.
"""

from __future__ import annotations

import re

DIM_NAMES = ("length", "mass", "time")


class UnitError(ValueError):
    pass


class Quantity:
    """Magnitude plus (length, mass, time) dimension exponents."""

    __slots__ = ("magnitude", "dims")

    def __init__(self, magnitude, dims=(0, 0, 0)):
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3:
            raise UnitError("dims must be (length, mass, time) exponents")
        if any(abs(d) > 8 for d in dims):
            raise UnitError(f"dimension exponents {dims} out of sane range |e| <= 8")
        self.magnitude = float(magnitude)
        self.dims = dims

    @property
    def dimensionless(self):
        return self.dims == (0, 0, 0)

    def __mul__(self, other):
        if isinstance(other, Quantity):
            return Quantity(self.magnitude * other.magnitude,
                            tuple(a + b for a, b in zip(self.dims, other.dims)))
        return Quantity(self.magnitude * other, self.dims)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Quantity):
            return Quantity(self.magnitude / other.magnitude,
                            tuple(a - b for a, b in zip(self.dims, other.dims)))
        return Quantity(self.magnitude / other, self.dims)

    def __rtruediv__(self, other):
        return Quantity(other / self.magnitude, tuple(-d for d in self.dims))

    def __pow__(self, exponent):
        if not isinstance(exponent, int):
            raise UnitError("quantities support integer powers only")
        return Quantity(self.magnitude ** exponent,
                        tuple(d * exponent for d in self.dims))

    def __add__(self, other):
        if not isinstance(other, Quantity) or other.dims != self.dims:
            raise UnitError("can only add quantities of identical dimensions")
        return Quantity(self.magnitude + other.magnitude, self.dims)

    def __sub__(self, other):
        if not isinstance(other, Quantity) or other.dims != self.dims:
            raise UnitError("can only subtract quantities of identical dimensions")
        return Quantity(self.magnitude - other.magnitude, self.dims)

    def __neg__(self):
        return Quantity(-self.magnitude, self.dims)

    def __eq__(self, other):
        return (isinstance(other, Quantity) and self.magnitude == other.magnitude
                and self.dims == other.dims)

    def __repr__(self):
        return f"Quantity({self.magnitude!r}, dims={self.dims})"

    def __str__(self):
        return format_quantity(self)


# base units as dimension exponent vectors; N and Pa reduce to base dims
_UNITS = {
    "m": ((1, 0, 0), 1.0),
    "kg": ((0, 1, 0), 1.0),
    "s": ((0, 0, 1), 1.0),
    "N": ((1, 1, -2), 1.0),
    "Pa": ((-1, 1, -2), 1.0),
}

meter = Quantity(1.0, (1, 0, 0))
kilogram = Quantity(1.0, (0, 1, 0))
second = Quantity(1.0, (0, 0, 1))
newton = Quantity(1.0, (1, 1, -2))
pascal = Quantity(1.0, (-1, 1, -2))

UNIT_CONSTANTS = {"m": meter, "kg": kilogram, "s": second, "N": newton, "Pa": pascal}

_NUMBER_RE = re.compile(r"[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?")
_UNIT_RE = re.compile(r"([A-Za-z]+)(\^(-?\d+))?")


def parse_quantity(text: str) -> Quantity:
    """Parse ``NUMBER ('*' UNIT)* ('/' UNIT)*`` with units m, kg, s, N, Pa.

    Units accept integer powers (``m^2``); syntax errors report the offending
    position.
    """
    s = text.strip()
    m = _NUMBER_RE.match(s)
    if not m:
        raise UnitError(f"expected a number at position 0 in {text!r}")
    magnitude = float(m.group(0))
    dims = [0, 0, 0]
    pos = m.end()
    phase = "*"
    while pos < len(s):
        op = s[pos]
        if op not in "*/":
            raise UnitError(f"expected '*' or '/' at position {pos} in {text!r}")
        if op == "*" and phase == "/":
            raise UnitError(
                f"'*' after '/' at position {pos} in {text!r}: multiplied units must come first")
        if op == "/":
            phase = "/"
        pos += 1
        um = _UNIT_RE.match(s, pos)
        if not um:
            raise UnitError(f"expected a unit name at position {pos} in {text!r}")
        name = um.group(1)
        if name not in _UNITS:
            raise UnitError(f"unknown unit {name!r} at position {pos} in {text!r}")
        power = int(um.group(3)) if um.group(3) else 1
        sign = 1 if op == "*" else -1
        unit_dims, factor = _UNITS[name]
        magnitude *= factor ** (sign * power)
        for i in range(3):
            dims[i] += sign * power * unit_dims[i]
        pos = um.end()
    return Quantity(magnitude, tuple(dims))


def format_quantity(q: Quantity) -> str:
    """Inverse of parse_quantity: ``<magnitude>*<units>/<units>``."""
    num, den = [], []
    for sym, exp in zip(("m", "kg", "s"), q.dims):
        if exp > 0:
            num.append(sym if exp == 1 else f"{sym}^{exp}")
        elif exp < 0:
            den.append(sym if exp == -1 else f"{sym}^{-exp}")
    out = repr(q.magnitude)
    if num:
        out += "*" + "*".join(num)
    if den:
        out += "/" + "/".join(den)
    return out


class LatticeScale:
    """Conversion scales: cell size dx, step dt, and reference density rho0."""

    def __init__(self, dx: Quantity, dt: Quantity, rho0: Quantity = None):
        if rho0 is None:
            rho0 = Quantity(1.0, (-3, 1, 0))
        for name, q, dims in (("dx", dx, (1, 0, 0)), ("dt", dt, (0, 0, 1)),
                              ("rho0", rho0, (-3, 1, 0))):
            if not isinstance(q, Quantity) or q.dims != dims:
                raise UnitError(f"{name} must be a quantity of dims {dims}")
            if q.magnitude <= 0:
                raise UnitError(f"{name} must be positive")
        self.dx = dx
        self.dt = dt
        self.rho0 = rho0

    @property
    def mass_scale(self):
        return self.rho0.magnitude * self.dx.magnitude ** 3


def to_lattice(q, scale: LatticeScale) -> float:
    """Dimensionless lattice value of q: divide by dx^a * M^b * dt^c."""
    if not isinstance(q, Quantity):
        return float(q)
    a, b, c = q.dims
    factor = (scale.dx.magnitude ** a) * (scale.mass_scale ** b) * (scale.dt.magnitude ** c)
    return q.magnitude / factor


def find_optimal_dt(config, omega_cap=1.95, u_cap=0.05) -> Quantity:
    """Largest stable time step for the given viscosity, dx, and peak velocity.

    The relaxation-rate cap bounds dt from below (omega_e <= omega_cap), the
    lattice-velocity cap from above (u_lattice <= u_cap); the result is the
    upper bound when the interval is non-empty.
    """
    physical = config.get("Physical", config)
    nu = physical.get("viscosity")
    dx = physical.get("dx")
    u_max = physical.get("u_max")
    if not isinstance(nu, Quantity) or nu.dims != (2, 0, -1):
        raise UnitError("find_optimal_dt needs Physical.viscosity with dims L^2/T")
    if not isinstance(dx, Quantity) or dx.dims != (1, 0, 0):
        raise UnitError("find_optimal_dt needs Physical.dx with dims L")
    if u_max is None:
        raise UnitError("missing constraint: Physical.u_max bounds dt from above")
    if not isinstance(u_max, Quantity) or u_max.dims != (1, 0, -1):
        raise UnitError("Physical.u_max must have dims L/T")

    nu_l_min = (1.0 / omega_cap - 0.5) / 3.0
    dt_min = nu_l_min * dx.magnitude ** 2 / nu.magnitude
    dt_max = u_cap * dx.magnitude / u_max.magnitude
    if dt_min > dt_max:
        raise UnitError(
            f"no feasible time step: stability needs dt >= {dt_min:.6g} s but the "
            f"velocity cap needs dt <= {dt_max:.6g} s")
    return Quantity(dt_max, (0, 0, 1))


def nondimensionalize_tree(tree, scale: LatticeScale):
    """Replace every Quantity leaf by its lattice value; structure is preserved."""
    def walk(node, path):
        if isinstance(node, dict):
            return {k: walk(v, path + (k,)) for k, v in node.items()}
        if isinstance(node, (list, tuple)):
            out = [walk(v, path + (i,)) for i, v in enumerate(node)]
            return out if isinstance(node, list) else tuple(out)
        if isinstance(node, Quantity):
            try:
                return to_lattice(node, scale)
            except Exception as exc:
                raise UnitError(f"cannot nondimensionalize {'.'.join(map(str, path))}: {exc}")
        return node
    return walk(tree, ())


def scale_from_tree(tree) -> LatticeScale:
    """Build the lattice scale from Physical.dx/dt (and rho0 when present)."""
    physical = tree.get("Physical", {})
    dx, dt = physical.get("dx"), physical.get("dt")
    if not isinstance(dx, Quantity) or not isinstance(dt, Quantity):
        raise UnitError("config must provide Physical.dx and Physical.dt as quantities")
    rho0 = physical.get("rho0")
    if rho0 is not None and not isinstance(rho0, Quantity):
        rho0 = Quantity(float(rho0), (-3, 1, 0))
    return LatticeScale(dx, dt, rho0)


def tree_has_quantities(tree) -> bool:
    if isinstance(tree, dict):
        return any(tree_has_quantities(v) for v in tree.values())
    if isinstance(tree, (list, tuple)):
        return any(tree_has_quantities(v) for v in tree)
    return isinstance(tree, Quantity)


def validate_config(tree):
    """Range and consistency checks on a nondimensionalized tree.

    Returns a list of (key path, message) diagnostics; empty means valid.
    """
    diagnostics = []

    def check(path, key, value):
        if key == "omega_e" and not (isinstance(value, (int, float)) and 0.0 < value < 2.0):
            diagnostics.append((path, f"omega_e must lie in (0, 2), got {value}"))
        if key == "timesteps" and not (isinstance(value, int) and value >= 1):
            diagnostics.append((path, f"timesteps must be an integer >= 1, got {value}"))
        if key == "vtk_output_interval" and not (isinstance(value, int) and value >= 1):
            diagnostics.append((path, f"vtk_output_interval must be an integer >= 1, got {value}"))
        if key == "surface_tension" and not (isinstance(value, (int, float)) and value >= 0.0):
            diagnostics.append((path, f"surface_tension must be >= 0, got {value}"))
        if key == "viscosity" and isinstance(value, (int, float)) and value <= 0.0:
            diagnostics.append((path, f"lattice viscosity must be positive, got {value}"))
        if isinstance(value, Quantity):
            diagnostics.append((path, "quantity survived nondimensionalization"))

    def walk(node, path):
        if isinstance(node, dict):
            for k, v in node.items():
                check(path + "." + str(k) if path else str(k), k, v)
                walk(v, path + "." + str(k) if path else str(k))
        elif isinstance(node, (list, tuple)):
            for i, v in enumerate(node):
                walk(v, f"{path}[{i}]")

    walk(tree, "")
    return diagnostics
