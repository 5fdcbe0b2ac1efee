"""Locally-periodic perforation geometry.

Holes are disks of radius ``eps * r(x_ij)`` centred on the lattice points
``x_ij = shift + eps * (i, j)``.  The radius field ``r`` is the single source
of truth; everything else (exact level set, its two-scale expansion, cell
geometry) is derived from it.

Sign convention: the level set is positive inside the holes and negative in
the fluid, i.e. the fluid part of the unit cell is ``{P(y) > r}``.
"""
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import SampleNearDiscontinuity, ValidationError
from .numerics import fit_order

HALF = 0.5
DEFAULT_R_MAX = 0.49


@dataclass(frozen=True)
class RadiusField:
    """Smooth dimensionless radius field ``r(x)`` on a rectangle.

    ``value``, ``gradient`` and ``hessian`` act on arrays of points with a
    trailing axis of length 2 and return shapes ``(...)``, ``(..., 2)`` and
    ``(..., 2, 2)``.
    """

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    domain: tuple = (0.0, 1.0, 0.0, 1.0)
    r_max: float = DEFAULT_R_MAX
    bounds: tuple = (0.0, 0.0)
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = self.bounds
        problems = []
        if not (0.0 < self.r_max < HALF):
            problems.append(f"r_max={self.r_max} must lie in (0, 1/2)")
        if lo < 0.0:
            problems.append(f"radius field {self.name} takes negative values (min {lo:g})")
        if hi >= HALF:
            problems.append(f"radius exceeds 1/2 (max {hi:g})")
        elif hi > self.r_max:
            problems.append(f"radius {hi:g} exceeds r_max={self.r_max:g}")
        x0, x1, y0, y1 = self.domain
        if not (x1 > x0 and y1 > y0):
            problems.append(f"empty domain {self.domain}")
        if problems:
            raise ValidationError(problems)

    def __call__(self, x):
        return self.value(np.asarray(x, dtype=float))


def _points(x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 2:
        raise ValueError(f"points need a trailing axis of length 2, got shape {x.shape}")
    return x


def constant(r0, domain=(0.0, 1.0, 0.0, 1.0), r_max=DEFAULT_R_MAX):
    r0 = float(r0)

    def value(x):
        return np.full(_points(x).shape[:-1], r0)

    def gradient(x):
        return np.zeros(_points(x).shape)

    def hessian(x):
        return np.zeros(_points(x).shape + (2,))

    return RadiusField(value, gradient, hessian, tuple(domain), r_max, (r0, r0),
                       "constant", {"r0": r0})


def linear(r0, g1, g2, domain=(0.0, 1.0, 0.0, 1.0), r_max=DEFAULT_R_MAX):
    """``r(x) = r0 + g1*x1 + g2*x2``; bounds are checked at the domain corners."""
    r0, g1, g2 = float(r0), float(g1), float(g2)
    g = np.array([g1, g2])
    x0, x1, y0, y1 = domain
    corners = [r0 + g1 * a + g2 * b for a in (x0, x1) for b in (y0, y1)]

    def value(x):
        return r0 + _points(x) @ g

    def gradient(x):
        return np.broadcast_to(g, _points(x).shape).copy()

    def hessian(x):
        return np.zeros(_points(x).shape + (2,))

    return RadiusField(value, gradient, hessian, tuple(domain), r_max,
                       (min(corners), max(corners)), "linear",
                       {"r0": r0, "g1": g1, "g2": g2})


def sine(r0, amp, freq, domain=(0.0, 1.0, 0.0, 1.0), r_max=DEFAULT_R_MAX):
    """``r(x) = r0 + amp*sin(2*pi*freq*x1)``; bounds use ``r0 -/+ |amp|``."""
    r0, amp, freq = float(r0), float(amp), float(freq)
    k = 2.0 * np.pi * freq

    def value(x):
        return r0 + amp * np.sin(k * _points(x)[..., 0])

    def gradient(x):
        x = _points(x)
        out = np.zeros(x.shape)
        out[..., 0] = amp * k * np.cos(k * x[..., 0])
        return out

    def hessian(x):
        x = _points(x)
        out = np.zeros(x.shape + (2,))
        out[..., 0, 0] = -amp * k * k * np.sin(k * x[..., 0])
        return out

    return RadiusField(value, gradient, hessian, tuple(domain), r_max,
                       (r0 - abs(amp), r0 + abs(amp)), "sine",
                       {"r0": r0, "amp": amp, "freq": freq})


FAMILIES = {"constant": constant, "linear": linear, "sine": sine}


@dataclass(frozen=True)
class LatticeOffset:
    Q: np.ndarray
    P: np.ndarray


def lattice_offset(y):
    """Offset of ``y`` from its nearest integer lattice point.

    ``Q = y - round(y)`` componentwise (ties round half to even) and
    ``P = |Q|``.  Works on single points and on stacks of points.
    """
    y = _points(y)
    Q = y - np.round(y)
    return LatticeOffset(Q, np.hypot(Q[..., 0], Q[..., 1]))


def lattice_points(x, eps, shift=0.0):
    """Centre of the period containing ``x``."""
    x = _points(x)
    return shift + eps * np.round((x - shift) / eps)


def levelset_exact(x, eps, r, shift=0.0):
    """Exact level set ``S(x) = r(x - eps*Q(x/eps)) - P(x/eps)``.

    ``shift`` translates the hole lattice; the default puts hole centres at
    ``eps * (i, j)``.  The zero set is the union of circles of radius
    ``eps * r(x_ij)`` around the lattice points, here in units of ``eps``:
    the returned value is dimensionless (per period).
    """
    x = _points(x)
    off = lattice_offset((x - shift) / eps)
    return r.value(x - eps * off.Q) - off.P


def levelset_expansion(x, y, r, order):
    """Individual expansion term ``S_order(x, y)`` of the level set.

    ``S0 = r(x) - P(y)``, ``S1 = -Q(y).grad r(x)``,
    ``S2 = Q(y).D2r(x) Q(y) / 2``.  The caller combines them as
    ``S0 + eps*S1 + eps**2*S2``.
    """
    x = _points(x)
    off = lattice_offset(y)
    if order == 0:
        return r.value(x) - off.P
    if order == 1:
        return -np.einsum("...i,...i->...", off.Q, r.gradient(x))
    if order == 2:
        return 0.5 * np.einsum("...i,...ij,...j->...", off.Q, r.hessian(x), off.Q)
    raise ValueError(f"expansion order must be 0, 1 or 2, got {order}")


def _band_samples(r, eps, shift, rng, n_anchor, n_angle, band, tol, max_tries=50):
    x0, x1, y0, y1 = r.domain
    s = np.linspace(0.0, 1.0, n_anchor + 2)[1:-1]
    anchors = np.stack(np.meshgrid(x0 + s * (x1 - x0), y0 + s * (y1 - y0),
                                   indexing="ij"), axis=-1).reshape(-1, 2)
    centres = np.unique(lattice_points(anchors, eps, shift), axis=0)
    rc = r.value(centres)
    phi = (np.arange(n_angle) + 0.5) * 2.0 * np.pi / n_angle
    offsets = np.array([-band, 0.0, band])
    rho = np.clip(rc[:, None, None] + offsets[None, :, None], 0.0, None)
    rho = np.broadcast_to(rho, (len(centres), 3, n_angle)).copy()
    ang = np.broadcast_to(phi, rho.shape).copy()

    def local(rho, ang):
        return np.stack([rho * np.cos(ang), rho * np.sin(ang)], axis=-1)

    for _ in range(max_tries):
        q = local(rho, ang)
        bad = np.any(np.abs(np.abs(q) - HALF) < tol, axis=-1) | np.any(np.abs(q) > HALF, axis=-1)
        if not bad.any():
            break
        lo = np.clip(rc[:, None, None] - band, 0.0, None)
        lo = np.broadcast_to(lo, rho.shape)
        hi = np.broadcast_to(rc[:, None, None] + band, rho.shape)
        rho[bad] = rng.uniform(lo[bad], hi[bad])
        ang[bad] = rng.uniform(0.0, 2.0 * np.pi, size=int(bad.sum()))
    else:
        raise SampleNearDiscontinuity(
            f"could not place {int(bad.sum())} samples away from cell boundaries at eps={eps}")
    return centres[:, None, None, :] + eps * q


def expansion_residual_order(r, eps_list, shift=0.0, n_anchor=8, n_angle=32,
                             band=0.1, tol=1e-6, seed=0, return_errors=False):
    """Fitted order of ``max |S_exact - (S0 + eps S1 + eps^2 S2)|`` in ``eps``.

    Samples lie within ``band*eps`` of the hole boundaries (the zero set of
    ``S0``) around a fixed set of lattice points.  If the residual is at
    machine precision for every ``eps`` (constant or linear ``r``) the slope
    is reported as ``inf``.
    """
    eps_list = np.asarray(eps_list, dtype=float)
    if eps_list.size < 4 or np.any(np.diff(eps_list) >= 0):
        raise ValueError("eps_list must be strictly decreasing with at least 4 entries")
    rng = np.random.default_rng(seed)
    errors = []
    for eps in eps_list:
        x = _band_samples(r, eps, shift, rng, n_anchor, n_angle, band, tol)
        y = (x - shift) / eps
        approx = (levelset_expansion(x, y, r, 0) + eps * levelset_expansion(x, y, r, 1)
                  + eps ** 2 * levelset_expansion(x, y, r, 2))
        errors.append(float(np.max(np.abs(levelset_exact(x, eps, r, shift) - approx))))
    errors = np.array(errors)
    if np.all(errors <= 1e-13):
        slope = np.inf
    else:
        slope = fit_order(eps_list, np.maximum(errors, 1e-300))
    return (slope, errors) if return_errors else slope


@dataclass(frozen=True)
class CellGeometry:
    """Unit cell ``U = [-1/2, 1/2]^2`` with a centred circular hole."""

    r: float

    def __post_init__(self):
        if not (0.0 <= self.r < HALF):
            raise ValidationError([f"cell radius {self.r} outside [0, 1/2)"])

    @property
    def hole_area(self):
        return np.pi * self.r ** 2

    @property
    def fluid_area(self):
        return 1.0 - np.pi * self.r ** 2

    @property
    def interface_length(self):
        return 2.0 * np.pi * self.r

    def in_hole(self, y):
        y = _points(y)
        return np.hypot(y[..., 0], y[..., 1]) < self.r

    def in_fluid(self, y):
        y = _points(y)
        return (np.hypot(y[..., 0], y[..., 1]) > self.r) & np.all(np.abs(y) <= HALF, axis=-1)

    def normal(self, y):
        """Unit normal on the interface pointing out of the hole into the fluid."""
        y = _points(y)
        return y / np.hypot(y[..., 0], y[..., 1])[..., None]


def porosity(r):
    """Fluid volume fraction ``1 - pi r^2`` (analytic, vectorised)."""
    r = np.asarray(r, dtype=float)
    return 1.0 - np.pi * r * r


def radius_field_from_config(family, params: dict, domain=(0.0, 1.0, 0.0, 1.0),
                             r_max=DEFAULT_R_MAX) -> RadiusField:
    if family not in FAMILIES:
        raise ValidationError([f"unknown radius family {family!r}; expected one of {sorted(FAMILIES)}"])
    return FAMILIES[family](**params, domain=domain, r_max=r_max)


def finite_difference_check(r: RadiusField, points: Sequence, h=1e-4):
    """Max deviation of ``r.gradient``/``r.hessian`` from centred differences."""
    x = _points(np.asarray(points, dtype=float))
    e = np.eye(2) * h
    g_fd = np.stack([(r.value(x + e[i]) - r.value(x - e[i])) / (2 * h) for i in range(2)], -1)
    h_fd = np.stack([(r.gradient(x + e[i]) - r.gradient(x - e[i])) / (2 * h) for i in range(2)], -1)
    return (float(np.max(np.abs(g_fd - r.gradient(x)))),
            float(np.max(np.abs(h_fd - r.hessian(x)))))
