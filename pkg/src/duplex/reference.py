"""Period-resolved reference solver for the perforated microscale model.

A single concentration field lives on a uniform grid of ``cells_per_period``
cells per period.  Cells whose centre lies inside a hole get diffusivity
``eps**2 D_l``, the others ``D_h``; faces use the harmonic mean, so continuity
of concentration and of normal flux across the (staircase) interfaces is
built into the two-point scheme.

Hole centres sit at ``x0 + eps (i + 1/2)``: every period of the domain holds
exactly one hole and the macro cells of a matching two-scale grid coincide
with the periods.
"""
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import GridMismatch, HoleOnBoundary, HolesTouch, InvalidData
from .cell import chord_overlap, disk_rect_area
from .geometry import constant, levelset_exact
from .macroflow import SIDES, MacroGrid, boundary_cells, boundary_transmissibility, face_harmonic
from .twoscale import as_field, run

log = logging.getLogger(__name__)


@dataclass
class FineGrid:
    """Phase-labelled fine grid; ``hole[i, j]`` is true inside a perforation."""

    eps: float
    cells_per_period: int
    extents: tuple
    r_cell: np.ndarray      # radius of the hole owning each cell's period
    hole: np.ndarray
    local: np.ndarray       # position relative to the period centre, in period units
    radius: object = None
    fluid_fraction: np.ndarray = None
    # fraction of each centre-to-centre segment lying inside a hole
    seg_x: np.ndarray = None
    seg_y: np.ndarray = None
    seg_boundary: dict = None
    faces: str = "exact"

    @property
    def shape(self):
        return self.hole.shape

    @property
    def h(self):
        return (self.extents[1] - self.extents[0]) / self.shape[0]

    @property
    def n_periods(self):
        return (self.shape[0] // self.cells_per_period, self.shape[1] // self.cells_per_period)

    def centers(self):
        x0, _, y0, _ = self.extents
        xc = x0 + (np.arange(self.shape[0]) + 0.5) * self.h
        yc = y0 + (np.arange(self.shape[1]) + 0.5) * self.h
        return np.meshgrid(xc, yc, indexing="ij")

    def boundary_points(self, side):
        x0, x1, y0, y1 = self.extents
        xc = x0 + (np.arange(self.shape[0]) + 0.5) * self.h
        yc = y0 + (np.arange(self.shape[1]) + 0.5) * self.h
        return {"left": np.stack([np.full_like(yc, x0), yc], -1),
                "right": np.stack([np.full_like(yc, x1), yc], -1),
                "bottom": np.stack([xc, np.full_like(xc, y0)], -1),
                "top": np.stack([xc, np.full_like(xc, y1)], -1)}[side]

    def diffusivity(self, D_h, D_l):
        return np.where(self.hole, self.eps ** 2 * D_l, D_h)

    def transmissibilities(self, D_h, D_l):
        """Interior ``(tx, ty)`` and boundary transmissibilities per side.

        With ``faces == "exact"`` every centre-to-centre segment is treated as
        two resistors in series, split where it crosses the circle; with
        ``"staircase"`` the harmonic mean of the two cell values is used.
        """
        h = self.h
        D_l = self.eps ** 2 * D_l
        if self.faces == "staircase":
            lam = self.diffusivity(D_h, D_l / self.eps ** 2)
            tx, ty = face_harmonic(lam, h, h)
            tb = {side: boundary_transmissibility(lam, side, h, h) for side in SIDES}
            return tx, ty, tb

        def series(frac, length):
            return h / (length * ((1.0 - frac) / D_h + frac / D_l))

        tb = {side: series(f, 0.5 * h) for side, f in self.seg_boundary.items()}
        return series(self.seg_x, h), series(self.seg_y, h), tb

    def period_view(self, a):
        """Reshape a cell array to ``(P1, P2, m, m)`` blocks, one per period."""
        m = self.cells_per_period
        P1, P2 = self.n_periods
        return a.reshape(P1, m, P2, m).transpose(0, 2, 1, 3)

    def hole_fraction(self):
        """Fraction of hole cells in every period."""
        return self.period_view(self.hole.astype(float)).mean(axis=(2, 3))


def _segment_in_disk(start, stop, across, radius):
    """Length of the axis-parallel segment ``[start, stop]`` inside a disk at the origin."""
    lo, hi = np.minimum(start, stop), np.maximum(start, stop)
    return chord_overlap(across, lo, hi, radius)


def build_fine_grid(r, eps, cells_per_period, margin=0.0, shift=None, faces="exact"):
    """Label a fine grid by the sign of the exact level set.

    ``margin`` is the smallest admissible gap (in x units) between the rim of a
    hole and the edge of its period; additionally the gap between neighbouring
    holes must hold at least one fine cell.  ``faces`` selects the face
    transmissibility rule (see :meth:`FineGrid.transmissibilities`).
    """
    if faces not in ("exact", "staircase"):
        raise ValueError(f"unknown face rule {faces!r}")
    x0, x1, y0, y1 = r.domain
    n_inv = 1.0 / eps
    if abs(n_inv - round(n_inv)) > 1e-9:
        raise GridMismatch(f"eps={eps} is not the reciprocal of an integer")
    if cells_per_period < 16:
        raise GridMismatch("cells_per_period must be at least 16")
    P1, P2 = (x1 - x0) / eps, (y1 - y0) / eps
    if abs(P1 - round(P1)) > 1e-9 or abs(P2 - round(P2)) > 1e-9:
        raise GridMismatch("domain extents are not whole multiples of eps")
    P1, P2 = int(round(P1)), int(round(P2))
    shift = np.array([x0, y0]) + 0.5 * eps if shift is None else np.broadcast_to(shift, (2,)).astype(float)

    centres = np.stack(np.meshgrid(shift[0] + eps * np.arange(-1, P1 + 1),
                                   shift[1] + eps * np.arange(-1, P2 + 1), indexing="ij"), -1)
    inside = ((centres[..., 0] >= x0) & (centres[..., 0] <= x1)
              & (centres[..., 1] >= y0) & (centres[..., 1] <= y1))
    r_lat = np.where(inside, r.value(np.clip(centres, [x0, y0], [x1, y1])), 0.0)
    r_top = float(np.max(r_lat))
    if eps * (0.5 - r_top) < margin or (1.0 - 2.0 * r_top) * cells_per_period < 1.0:
        raise HolesTouch(f"max lattice radius {r_top:.4f} leaves no gap at eps={eps} "
                         f"(margin {margin}, {cells_per_period} cells per period)")
    # a hole meets the outer boundary if its disk reaches past the rectangle
    c, rr = centres[inside], eps * r_lat[inside]
    reach = np.minimum.reduce([c[:, 0] - x0, x1 - c[:, 0], c[:, 1] - y0, y1 - c[:, 1]])
    if np.any((rr > 0) & (reach < rr)):
        raise HoleOnBoundary("a perforation intersects the outer boundary")

    m = cells_per_period
    grid = FineGrid(eps, m, (x0, x1, y0, y1), np.zeros((P1 * m, P2 * m)), np.zeros((P1 * m, P2 * m), bool),
                    np.zeros((P1 * m, P2 * m, 2)), r)
    X, Y = grid.centers()
    pts = np.stack([X, Y], -1)
    S = levelset_exact(pts, eps, r, shift)
    grid.hole = S > 0.0
    lat = shift + eps * np.round((pts - shift) / eps)
    grid.local = (pts - lat) / eps
    grid.r_cell = r.value(lat)
    grid.faces = faces

    # geometry in period units: cell width s, local centre (lx, ly), radius rc
    s = grid.h / eps
    lx, ly, rc = grid.local[..., 0], grid.local[..., 1], grid.r_cell
    hole_area = disk_rect_area(lx - s / 2, lx + s / 2, ly - s / 2, ly + s / 2, rc)
    grid.fluid_fraction = 1.0 - hole_area / (s * s)

    def pieces(a, b, axis):
        # segment from the centre of cell a to the centre of cell b (one step along axis)
        la, lb = grid.local[a], grid.local[b]
        other = 1 - axis
        own = _segment_in_disk(la[..., axis], la[..., axis] + s, la[..., other], rc[a])
        same = np.all(lat[a] == lat[b], axis=-1)
        nb = _segment_in_disk(lb[..., axis] - s, lb[..., axis], lb[..., other], rc[b])
        return (own + np.where(same, 0.0, nb)) / s

    grid.seg_x = pieces((slice(0, -1), slice(None)), (slice(1, None), slice(None)), 0)
    grid.seg_y = pieces((slice(None), slice(0, -1)), (slice(None), slice(1, None)), 1)
    half = {"left": (np.s_[0, :], 0, -1), "right": (np.s_[-1, :], 0, 1),
            "bottom": (np.s_[:, 0], 1, -1), "top": (np.s_[:, -1], 1, 1)}
    grid.seg_boundary = {}
    for side, (sl, axis, sign) in half.items():
        loc = grid.local[sl]
        pos = loc[..., axis]
        grid.seg_boundary[side] = _segment_in_disk(pos, pos + sign * s / 2, loc[..., 1 - axis], rc[sl]) / (s / 2)
    return grid


@dataclass
class FineTrajectory:
    grid: FineGrid
    snapshots: dict
    mass: list = field(default_factory=list)
    outflow: list = field(default_factory=list)

    def max_relative_drift(self):
        scale = max(max(abs(m) for m in self.mass), 1e-300)
        return max(abs(m - (self.mass[0] - o)) for m, o in zip(self.mass, self.outflow)) / scale

    def write_snapshot(self, path, epoch):
        X, Y = self.grid.centers()
        u = self.snapshots[epoch]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["i", "j", "x1", "x2", "phase", "u"])
            for i in range(u.shape[0]):
                for j in range(u.shape[1]):
                    out.writerow([i, j, format(float(X[i, j]), ".17g"), format(float(Y[i, j]), ".17g"),
                                  "hole" if self.grid.hole[i, j] else "fluid", format(float(u[i, j]), ".17g")])


def _initial_field(grid, cfg):
    X, Y = grid.centers()
    pts = np.stack([X, Y], -1)
    u0 = np.broadcast_to(np.asarray(as_field(cfg.u_I)(pts), dtype=float), X.shape)
    flat = pts.reshape(-1, 1, 2)
    y = grid.local.reshape(-1, 1, 2)
    v0 = np.asarray(as_field(cfg.v_I)(flat.reshape(-1, 2), y), dtype=float)
    v0 = np.broadcast_to(v0, (flat.shape[0], 1)).reshape(X.shape)
    field0 = np.where(grid.hole, v0, u0).astype(float)
    if not np.all(np.isfinite(field0)) or np.any(field0 < 0):
        raise InvalidData("initial data must be finite and non-negative")
    return field0


def run_reference(grid, cfg, q=(0.0, 0.0)):
    """Backward-Euler finite volumes for the single heterogeneous field.

    ``q`` is an optional uniform velocity, accepted only without holes.
    Snapshots are taken at ``t = 0`` and at every epoch of ``cfg``.
    """
    problems = cfg.violations()
    if problems:
        raise InvalidData("; ".join(problems))
    q = np.asarray(q, dtype=float)
    if np.any(q != 0) and np.any(grid.hole):
        raise InvalidData("fine-scale advection is only supported without perforations")
    M1, M2 = grid.shape
    n = M1 * M2
    h = grid.h
    dt = cfg.dt
    tx, ty, tbs = grid.transmissibilities(cfg.D_h, cfg.D_l)
    idx = np.arange(n).reshape(M1, M2)
    rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.full(n, h * h / dt)]
    for lo, hi, t, F in ((idx[:-1], idx[1:], tx, q[0] * h), (idx[:, :-1], idx[:, 1:], ty, q[1] * h)):
        lo, hi = lo.ravel(), hi.ravel()
        t = t.ravel()
        pos, neg = max(F, 0.0), min(F, 0.0)
        rows.extend([lo, hi, lo, hi, lo, lo, hi, hi])
        cols.extend([lo, hi, hi, lo, lo, hi, lo, hi])
        vals.extend([t, t, -t, -t, np.full(lo.size, pos), np.full(lo.size, neg),
                     np.full(lo.size, -pos), np.full(lo.size, -neg)])
    sides = {}
    normals = {"left": -q[0], "right": q[0], "bottom": -q[1], "top": q[1]}
    for side in SIDES:
        cells = boundary_cells(grid.shape, side)
        F = normals[side] * h
        tb = tbs[side] if cfg.boundary.get(side, "dirichlet") == "dirichlet" else np.zeros(cells.size)
        rows.append(cells)
        cols.append(cells)
        vals.append(tb + max(F, 0.0))
        sides[side] = (cells, tb, F)
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsc()
    lu = splu(A)
    ub = as_field(cfg.u_b)

    def bvals(side, t):
        pts = grid.boundary_points(side)
        return np.broadcast_to(np.asarray(ub(pts, t), dtype=float), pts.shape[:1])

    u = _initial_field(grid, cfg).ravel()
    snapshots = {0.0: u.reshape(M1, M2).copy()}
    epoch_steps = {int(round(e / dt)): e for e in cfg.epochs if 0 < e <= cfg.T + 1e-12}
    mass, outflow = [h * h * float(u.sum())], [0.0]
    acc = 0.0
    for step in range(1, cfg.n_steps + 1):
        t = step * dt
        rhs = h * h * u / dt
        for side, (cells, tb, F) in sides.items():
            b = bvals(side, t)
            rhs[cells] += tb * b - min(F, 0.0) * b
        u = lu.solve(rhs)
        for side, (cells, tb, F) in sides.items():
            b = bvals(side, t)
            acc += dt * float(np.sum(tb * (u[cells] - b) + max(F, 0.0) * u[cells] + min(F, 0.0) * b))
        mass.append(h * h * float(u.sum()))
        outflow.append(acc)
        if step in epoch_steps:
            snapshots[epoch_steps[step]] = u.reshape(M1, M2).copy()
    return FineTrajectory(grid, snapshots, mass, outflow)


@dataclass
class ErrorTable:
    rows: list   # (eps, epoch, l2_error_u, l2_error_v)

    def errors(self, epoch=None):
        return [row[2] for row in self.rows if epoch is None or row[1] == epoch]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["eps", "epoch", "l2_error_u"])
            for eps, epoch, eu, _ in self.rows:
                out.writerow([format(eps, ".17g"), format(epoch, ".17g"), format(eu, ".17g")])


def _block_mean(a, shape):
    M1, M2 = a.shape
    P1, P2 = shape
    if M1 % P1 or M2 % P2:
        raise GridMismatch(f"macro grid {a.shape} does not refine the period grid {shape}")
    return a.reshape(P1, M1 // P1, P2, M2 // P2).mean(axis=(1, 3))


def fluid_average(fine, epoch):
    """Fluid average of a fine snapshot over each period.

    Cells are weighted by their exact fluid area fraction.
    """
    g = fine.grid
    u = g.period_view(fine.snapshots[epoch])
    w = g.period_view(g.fluid_fraction)
    return (u * w).sum(axis=(2, 3)) / w.sum(axis=(2, 3))


def _macro_window(fine_grid, macro_grid):
    """Index window of the macro cells covering the fine rectangle."""
    fx0, fx1, fy0, fy1 = fine_grid.extents
    tx0, tx1, ty0, ty1 = macro_grid.extents
    if fx0 < tx0 - 1e-12 or fx1 > tx1 + 1e-12 or fy0 < ty0 - 1e-12 or fy1 > ty1 + 1e-12:
        raise GridMismatch(f"fine domain {fine_grid.extents} is not inside {macro_grid.extents}")
    edges = [(fx0 - tx0) / macro_grid.dx, (fx1 - tx0) / macro_grid.dx,
             (fy0 - ty0) / macro_grid.dy, (fy1 - ty0) / macro_grid.dy]
    if any(abs(e - round(e)) > 1e-9 for e in edges):
        raise GridMismatch("fine domain is not aligned with the macro cells")
    i0, i1, j0, j1 = (int(round(e)) for e in edges)
    P1, P2 = fine_grid.n_periods
    if (i1 - i0) % P1 or (j1 - j0) % P2:
        raise GridMismatch(f"macro grid {macro_grid.shape} does not refine the period grid")
    return i0, i1, j0, j1


def _micro_at(state, macro_shape, window, grid):
    """Two-scale micro profile evaluated at the hole cells of each period."""
    P1, P2 = grid.n_periods
    M1, M2 = macro_shape
    i0, i1, j0, j1 = window
    f1, f2 = (i1 - i0) // P1, (j1 - j0) // P2
    v = state.micro.v.reshape(M1, M2, -1)
    rc = state.micro.r.reshape(M1, M2)
    m = grid.cells_per_period
    K = v.shape[-1] - 1
    rho = np.hypot(grid.local[..., 0], grid.local[..., 1])
    out = np.zeros(grid.shape)
    for i, j in zip(*np.nonzero(grid.hole)):
        # macro cell holding the period centre
        ci = i0 + (i // m) * f1 + f1 // 2
        cj = j0 + (j // m) * f2 + f2 // 2
        nodes = rc[ci, cj] * np.arange(K + 1) / K
        out[i, j] = np.interp(rho[i, j], nodes, v[ci, cj])
    return out


def compare_to_twoscale(fine, twoscale, epochs=None):
    """L2 errors between period-averaged fine fields and the two-scale run.

    The fine rectangle must lie inside the two-scale domain, aligned with
    its cells, and the covering macro cells must refine the period grid;
    they are block-averaged onto the periods.  Errors are L2 norms divided
    by the square root of the compared area, i.e. plain L2 norms on a unit
    square.  ``twoscale`` is a :class:`~duplex.twoscale.RunResult`.
    """
    g = fine.grid
    tg = twoscale.grid
    window = _macro_window(g, tg)
    i0, i1, j0, j1 = window
    area = (g.extents[1] - g.extents[0]) * (g.extents[3] - g.extents[2])
    epochs = sorted(set(fine.snapshots) & set(twoscale.snapshots)) if epochs is None else epochs
    rows = []
    for epoch in epochs:
        if epoch not in fine.snapshots or epoch not in twoscale.snapshots:
            raise GridMismatch(f"epoch {epoch} missing from one of the trajectories")
        st = twoscale.snapshots[epoch]
        u_ts = _block_mean(st.u.reshape(tg.shape)[i0:i1, j0:j1], g.n_periods)
        eu = math.sqrt(g.eps ** 2 * float(np.sum((fluid_average(fine, epoch) - u_ts) ** 2)) / area)
        ev = float("nan")
        if np.any(g.hole):
            diff = np.where(g.hole, fine.snapshots[epoch] - _micro_at(st, tg.shape, window, g), 0.0)
            ev = math.sqrt(g.h ** 2 * float(np.sum(diff ** 2)) / area)
        rows.append((g.eps, float(epoch), eu, ev))
    return ErrorTable(rows)


def invariant_in_x2(cfg, extents, n_sample=64, seed=0):
    """True when data and boundary kinds allow the one-period strip reduction.

    Requires no-flux bottom and top sides and ``u_b``, ``u_I``, ``v_I`` that do
    not depend on ``x2`` (checked on seeded random samples).
    """
    if cfg.boundary.get("bottom") != "noflux" or cfg.boundary.get("top") != "noflux":
        return False
    rng = np.random.default_rng(seed)
    x0, x1, y0, y1 = extents
    pts = np.stack([rng.uniform(x0, x1, n_sample), rng.uniform(y0, y1, n_sample)], -1)
    moved = pts.copy()
    moved[:, 1] = rng.uniform(y0, y1, n_sample)
    y = rng.uniform(-0.3, 0.3, (n_sample, 3, 2))
    checks = [(as_field(cfg.u_I)(pts), as_field(cfg.u_I)(moved)),
              (as_field(cfg.v_I)(pts, y), as_field(cfg.v_I)(moved, y))]
    for t in (0.0, 0.5 * cfg.T, cfg.T):
        checks.append((as_field(cfg.u_b)(pts, t), as_field(cfg.u_b)(moved, t)))
    return all(np.array_equal(np.broadcast_to(a, np.shape(b)), np.broadcast_to(b, np.shape(a))) for a, b in checks)


def study_domain(extents, eps, strip):
    """Fine-run rectangle: the full domain, or its bottom strip one period tall."""
    x0, x1, y0, y1 = extents
    return (x0, x1, y0, y0 + eps) if strip else (x0, x1, y0, y1)


def convergence_study(r0, eps_list, cells_per_period, cfg, macro_shape, a11, extents=(0.0, 1.0, 0.0, 1.0),
                      threads=1, strip=None):
    """Fine runs for every ``eps`` against one two-scale run, diffusion only.

    The perforations have the constant radius ``r0``; ``a11`` is the matching
    effective diffusivity multiplier.  When the data do not depend on ``x2``
    and bottom and top are no-flux (``strip=None`` detects this), the fine
    problem is solved on a strip one period tall: the holes are symmetric
    about the period edges, so the full solution is that strip repeated.
    With ``threads > 1`` the fine runs are executed concurrently; each is
    self-contained so the results do not depend on the thread count.
    Returns ``(table, twoscale_result, fine_runs)``.
    """
    extents = tuple(extents)
    if strip is None:
        strip = invariant_in_x2(cfg, extents)
    grid = MacroGrid.homogeneous(extents, macro_shape, r=r0, a11=a11)
    ts = run(grid, cfg)

    def one(eps):
        radius = constant(r0, domain=study_domain(extents, eps, strip))
        return run_reference(build_fine_grid(radius, eps, cells_per_period), cfg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fine = list(pool.map(one, eps_list))
    else:
        fine = [one(eps) for eps in eps_list]
    rows = []
    for fr in fine:
        rows.extend(compare_to_twoscale(fr, ts).rows)
    return ErrorTable(rows), ts, fine


def is_decreasing(table, epoch):
    """Errors at ``epoch`` strictly decrease as ``eps`` decreases."""
    pairs = sorted(((row[0], row[2]) for row in table.rows if row[1] == epoch), reverse=True)
    return all(b < a for (_, a), (_, b) in zip(pairs, pairs[1:]))
