"""Macroscopic Darcy flow ``q = -kappa K(x) grad p``, ``div q = 0``.

Two-point flux finite volumes on a uniform rectangular grid.  Face fluxes
are stored as velocities: ``qx[i, j]`` is the x-velocity on the face left of
cell ``(i, j)`` (``i = 0..M1``), ``qy[i, j]`` the y-velocity below it.
"""
import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import IncompatibleFlux, NoConvergence, ValidationError
from .geometry import porosity
from .numerics import SparseSystem, cg_solve

log = logging.getLogger(__name__)

SIDES = ("left", "right", "bottom", "top")
FLOW_TOL = 1e-13


@dataclass
class MacroGrid:
    """Uniform ``M1 x M2`` cell grid on ``extents = (x0, x1, y0, y1)``.

    Per-cell data: radius ``r``, porosity ``theta``, effective diffusivity
    ``a11`` and permeability ``k11`` multipliers.
    """

    extents: tuple
    shape: tuple
    r: np.ndarray
    theta: np.ndarray
    a11: np.ndarray
    k11: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        M1, M2 = self.shape
        for name in ("r", "theta", "a11", "k11"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr = np.broadcast_to(arr, (M1, M2)).copy()
            setattr(self, name, arr)
        if np.any(self.r < 0) or np.any(self.r >= 0.5):
            raise ValidationError(["cell radii must lie in [0, 1/2)"])
        if np.any(self.k11 <= 0) or np.any(self.a11 <= 0):
            raise ValidationError(["effective coefficients must be positive definite in every cell"])

    @classmethod
    def homogeneous(cls, extents, shape, r=0.0, a11=None, k11=None):
        r = np.asarray(r, dtype=float)
        return cls(tuple(extents), tuple(shape), r, porosity(r),
                   1.0 if a11 is None else a11, 1.0 if k11 is None else k11)

    @classmethod
    def from_radius(cls, radius, shape, tables):
        """Sample ``r`` at cell centres and look up the tabulated coefficients."""
        grid = cls.homogeneous(radius.domain, shape)
        X, Y = grid.centers()
        r = radius.value(np.stack([X, Y], axis=-1))
        off = max((max(abs(c.K[0, 1]), abs(c.K[1, 0]), abs(c.A[0, 1]), abs(c.A[1, 0]))
                   for c in tables.rows), default=0.0)
        log.info("dropping off-diagonal effective coefficients (max magnitude %.3e)", off)
        return cls(tuple(radius.domain), tuple(shape), r, porosity(r), tables.a11(r),
                   tables.k11(r), {"dropped_offdiag": off})

    @property
    def dx(self):
        return (self.extents[1] - self.extents[0]) / self.shape[0]

    @property
    def dy(self):
        return (self.extents[3] - self.extents[2]) / self.shape[1]

    @property
    def cell_volume(self):
        return self.dx * self.dy

    def centers(self):
        x0, _, y0, _ = self.extents
        xc = x0 + (np.arange(self.shape[0]) + 0.5) * self.dx
        yc = y0 + (np.arange(self.shape[1]) + 0.5) * self.dy
        return np.meshgrid(xc, yc, indexing="ij")

    def boundary_points(self, side):
        """Face centres along one side of the rectangle."""
        x0, x1, y0, y1 = self.extents
        xc = x0 + (np.arange(self.shape[0]) + 0.5) * self.dx
        yc = y0 + (np.arange(self.shape[1]) + 0.5) * self.dy
        if side == "left":
            return np.stack([np.full_like(yc, x0), yc], -1)
        if side == "right":
            return np.stack([np.full_like(yc, x1), yc], -1)
        if side == "bottom":
            return np.stack([xc, np.full_like(xc, y0)], -1)
        if side == "top":
            return np.stack([xc, np.full_like(xc, y1)], -1)
        raise ValueError(f"unknown side {side!r}")


def face_harmonic(lam, dx, dy):
    """Two-point transmissibilities with harmonic averaging of a cell field.

    Returns ``(tx, ty)`` for interior faces: ``tx`` has shape ``(M1-1, M2)``.
    """
    tx = dy * 2.0 * lam[1:] * lam[:-1] / ((lam[1:] + lam[:-1]) * dx)
    ty = dx * 2.0 * lam[:, 1:] * lam[:, :-1] / ((lam[:, 1:] + lam[:, :-1]) * dy)
    return tx, ty


def boundary_transmissibility(lam, side, dx, dy):
    if side == "left":
        return dy * lam[0] / (0.5 * dx)
    if side == "right":
        return dy * lam[-1] / (0.5 * dx)
    if side == "bottom":
        return dx * lam[:, 0] / (0.5 * dy)
    return dx * lam[:, -1] / (0.5 * dy)


def boundary_cells(shape, side):
    M1, M2 = shape
    idx = np.arange(M1 * M2).reshape(M1, M2)
    return {"left": idx[0], "right": idx[-1], "bottom": idx[:, 0], "top": idx[:, -1]}[side]


def _side_value(value, pts, *args):
    if callable(value):
        return np.broadcast_to(np.asarray(value(pts, *args), dtype=float), pts.shape[:1]).copy()
    return np.full(pts.shape[0], float(value))


@dataclass
class MacroFlow:
    grid: MacroGrid
    p: np.ndarray
    qx: np.ndarray
    qy: np.ndarray
    divergence: np.ndarray
    iterations: int = 0

    def max_divergence(self):
        return float(np.max(np.abs(self.divergence)))

    def outward_flux(self, side):
        """Outward normal flux (per unit length) on the faces of one side."""
        return {"left": -self.qx[0], "right": self.qx[-1],
                "bottom": -self.qy[:, 0], "top": self.qy[:, -1]}[side]

    def write_csv(self, path):
        X, Y = self.grid.centers()
        ux = 0.5 * (self.qx[1:] + self.qx[:-1])
        uy = 0.5 * (self.qy[:, 1:] + self.qy[:, :-1])
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["i", "j", "x1", "x2", "p", "qx", "qy"])
            M1, M2 = self.grid.shape
            for i in range(M1):
                for j in range(M2):
                    out.writerow([i, j] + [format(float(v), ".17g") for v in
                                           (X[i, j], Y[i, j], self.p[i, j], ux[i, j], uy[i, j])])


def zero_flow(grid):
    M1, M2 = grid.shape
    return MacroFlow(grid, np.zeros((M1, M2)), np.zeros((M1 + 1, M2)), np.zeros((M1, M2 + 1)),
                     np.zeros((M1, M2)))


def solve_flow(grid, kappa, bc=None, tol=FLOW_TOL):
    """Two-point-flux solve of the upscaled Darcy problem.

    ``bc`` maps each side to ``("flux", value)`` (outward normal flux
    ``q.nu``) or ``("pressure", value)``; values are scalars or callables of
    the face-centre points.  Missing sides default to no-flow.  With flux data
    on every side the pressure is fixed to mean zero.
    """
    if kappa <= 0:
        raise ValidationError(["kappa must be positive"])
    bc = dict(bc or {})
    for side in bc:
        if side not in SIDES:
            raise ValidationError([f"unknown boundary side {side!r}"])
    M1, M2 = grid.shape
    dx, dy = grid.dx, grid.dy
    n = M1 * M2
    lam = kappa * grid.k11
    tx, ty = face_harmonic(lam, dx, dy)
    idx = np.arange(n).reshape(M1, M2)

    rows = [idx[1:].ravel(), idx[:-1].ravel(), idx[:, 1:].ravel(), idx[:, :-1].ravel()]
    cols = [idx[:-1].ravel(), idx[1:].ravel(), idx[:, :-1].ravel(), idx[:, 1:].ravel()]
    offd = [-tx.ravel(), -tx.ravel(), -ty.ravel(), -ty.ravel()]
    diag = np.zeros((M1, M2))
    diag[1:] += tx
    diag[:-1] += tx
    diag[:, 1:] += ty
    diag[:, :-1] += ty
    b = np.zeros(n)

    bdata = {}
    any_pressure = False
    for side in SIDES:
        kind, value = bc.get(side, ("flux", 0.0))
        pts = grid.boundary_points(side)
        vals = _side_value(value, pts)
        cells = boundary_cells(grid.shape, side)
        length = dy if side in ("left", "right") else dx
        if kind == "flux":
            np.add.at(b, cells, -vals * length)
        elif kind == "pressure":
            any_pressure = True
            tb = boundary_transmissibility(lam, side, dx, dy)
            diag.ravel()[cells] += tb
            np.add.at(b, cells, tb * vals)
            bdata[side] = (tb, vals)
        else:
            raise ValidationError([f"unknown flow boundary kind {kind!r} on {side}"])
        bdata.setdefault(side, (None, vals))

    A = sp.coo_matrix((np.concatenate(offd + [diag.ravel()]),
                       (np.concatenate(rows + [np.arange(n)]), np.concatenate(cols + [np.arange(n)]))),
                      shape=(n, n)).tocsr()
    if not any_pressure:
        total = b.sum()
        scale = max(1.0, float(np.abs(b).sum()))
        if abs(total) > 1e-12 * scale:
            raise IncompatibleFlux(f"net boundary influx {total:.3e} violates the divergence theorem")
        b -= b.mean()
    try:
        p, iters = cg_solve(SparseSystem(A, b), tol=tol)
    except NoConvergence as exc:
        raise NoConvergence(exc.max_iter, exc.residual, "macro flow") from None
    if not any_pressure:
        p -= p.mean()
    p = p.reshape(M1, M2)

    qx = np.zeros((M1 + 1, M2))
    qy = np.zeros((M1, M2 + 1))
    qx[1:-1] = -tx * (p[1:] - p[:-1]) / dy
    qy[:, 1:-1] = -ty * (p[:, 1:] - p[:, :-1]) / dx
    for side in SIDES:
        tb, vals = bdata[side]
        if tb is None:
            out = vals
        else:
            cellp = {"left": p[0], "right": p[-1], "bottom": p[:, 0], "top": p[:, -1]}[side]
            length = dy if side in ("left", "right") else dx
            out = tb * (cellp - vals) / length
        if side == "left":
            qx[0] = -out
        elif side == "right":
            qx[-1] = out
        elif side == "bottom":
            qy[:, 0] = -out
        else:
            qy[:, -1] = out
    div = (qx[1:] - qx[:-1]) * dy + (qy[:, 1:] - qy[:, :-1]) * dx
    return MacroFlow(grid, p, qx, qy, div, iters)


def max_face_speed(flow):
    return float(max(np.max(np.abs(flow.qx), initial=0.0), np.max(np.abs(flow.qy), initial=0.0)))
