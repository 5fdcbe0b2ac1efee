"""Unit-cell problems on the perforated periodic cell and effective coefficients.

The cell ``U = [-1/2, 1/2]^2`` is covered by an ``N x N`` Cartesian grid.  Each
grid cell carries the exact area of its fluid part ``{|y| > r}`` and each face
its exact fluid aperture, so the finite-volume balance over a cut cell is
closed by the divergence theorem on the true fluid region.  Both cell
problems share the discrete operator

    sum_f (a_f / h) (v_i - v_nb) = rhs_i

with a zero-flux interface, periodic faces and a mean-zero gauge.
"""
import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import NoConvergence, ResolutionTooCoarse, ValidationError
from .geometry import porosity
from .numerics import InterpTable, SparseSystem, cg_solve

TINY_VOLUME = 1e-10
CELL_TOL = 1e-10
CSV_HEADER = ["r", "theta", "a11", "a12", "a21", "a22", "k11", "k12", "k21", "k22",
              "energy1", "energy2", "residual"]


def _quadrant_area(x, y, r):
    """Area of ``[0, x] x [0, y]`` inside the disk of radius ``r`` (x, y >= 0)."""
    xc = np.minimum(x, r)
    yc = np.minimum(y, r)
    inside = xc * xc + yc * yc <= r * r
    s = np.sqrt(np.maximum(r * r - yc * yc, 0.0))
    s = np.minimum(s, xc)

    def prim(t):
        t = np.clip(t, -r, r)
        ratio = np.divide(t, r, out=np.zeros(np.broadcast_shapes(np.shape(t), np.shape(r))), where=r > 0)
        return 0.5 * (t * np.sqrt(np.maximum(r * r - t * t, 0.0)) + r * r * np.arcsin(ratio))

    out = s * yc + prim(xc) - prim(s)
    return np.where(inside, xc * yc, out)


def disk_rect_area(x0, x1, y0, y1, r):
    """Exact area of ``[x0, x1] x [y0, y1]`` intersected with the disk ``|y| < r``."""
    if np.all(np.asarray(r) == 0.0):
        return np.zeros(np.broadcast_shapes(np.shape(x0), np.shape(y0), np.shape(r)))

    def G(x, y):
        return np.sign(x) * np.sign(y) * _quadrant_area(np.abs(x), np.abs(y), r)

    return G(x1, y1) - G(x0, y1) - G(x1, y0) + G(x0, y0)


def chord_overlap(pos, lo, hi, r):
    """Length of the segment ``[lo, hi]`` on the line ``pos`` that lies in the disk."""
    c = np.sqrt(np.maximum(r * r - pos * pos, 0.0))
    return np.clip(np.minimum(hi, c) - np.maximum(lo, -c), 0.0, None)


def _arc_pieces(x0, x1, y0, y1, r):
    """Angle intervals of the circle ``|y| = r`` lying inside the box."""
    cand = [0.0, 2.0 * math.pi]
    for a in (x0, x1):
        if abs(a) <= r:
            t = math.acos(a / r)
            cand += [t, 2.0 * math.pi - t]
    for b in (y0, y1):
        if abs(b) <= r:
            t = math.asin(b / r)
            cand += [t % (2.0 * math.pi), math.pi - t]
    cand = sorted(set(c % (2.0 * math.pi) for c in cand) | {2.0 * math.pi})
    pieces = []
    for p0, p1 in zip(cand[:-1], cand[1:]):
        if p1 - p0 <= 1e-14:
            continue
        m = 0.5 * (p0 + p1)
        cx, cy = r * math.cos(m), r * math.sin(m)
        if x0 < cx < x1 and y0 < cy < y1:
            if pieces and abs(pieces[-1][1] - p0) <= 1e-14:
                pieces[-1][1] = p1
            else:
                pieces.append([p0, p1])
    if len(pieces) > 1 and pieces[0][0] <= 1e-14 and pieces[-1][1] >= 2.0 * math.pi - 1e-14:
        last = pieces.pop()
        pieces[0] = [last[0] - 2.0 * math.pi, pieces[0][1]]
    return pieces


@dataclass
class CellMesh:
    """Cut-cell discretisation of the perforated unit cell.

    Arrays are indexed ``[i, j]`` with ``i`` along ``y1``.  ``ax[i, j]`` is the
    fluid aperture of the face at ``y1 = -1/2 + i*h`` (left face of cell
    ``(i, j)``; face 0 doubles as the periodic partner of face ``N``), and
    ``ay[i, j]`` the aperture of the bottom face.  ``arc_normal[i, j]`` is the
    integral of the interface normal (pointing into the fluid) over the arc
    inside cell ``(i, j)``.
    """

    r: float
    N: int
    volume: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    arc_normal: np.ndarray
    unknown: np.ndarray
    n_unknowns: int

    @property
    def h(self):
        return 1.0 / self.N

    @property
    def fluid_volume(self):
        return float(self.volume.sum())

    def centers(self):
        c = -0.5 + (np.arange(self.N) + 0.5) * self.h
        return np.meshgrid(c, c, indexing="ij")

    def connected(self):
        """True if the fluid cells form a single periodic component."""
        adj = self._adjacency(self.ax, self.ay, np.arange(self.N * self.N).reshape(self.N, self.N))
        wet = (self.volume > 0).ravel()
        graph = adj[wet][:, wet]
        n, _ = connected_components(graph, directed=False)
        return n == 1

    @staticmethod
    def _adjacency(ax, ay, index):
        N = index.shape[0]
        left = np.roll(index, 1, axis=0)
        below = np.roll(index, 1, axis=1)
        rows = np.concatenate([index[ax > 0], index[ay > 0]])
        cols = np.concatenate([left[ax > 0], below[ay > 0]])
        A = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(N * N, N * N)).tocsr()
        return A + A.T

    def faces(self):
        """Faces with distinct unknowns on both sides: (direction, lo, hi, aperture, i, j)."""
        left = np.roll(self.unknown, 1, axis=0)
        below = np.roll(self.unknown, 1, axis=1)
        out = []
        for d, a, nb in ((0, self.ax, left), (1, self.ay, below)):
            ok = (a > 0) & (nb >= 0) & (self.unknown >= 0)
            out.append((d, nb[ok], self.unknown[ok], a[ok], ok))
        return out


def build_cell_mesh(r, N):
    """Cut-cell mesh of ``U`` minus the disk of radius ``r``.

    Fluid areas and face apertures are exact circle-segment geometry.  Cells
    whose fluid volume is below ``1e-10 h^2`` are merged into the neighbour
    across their widest aperture.
    """
    r = float(r)
    N = int(N)
    if not (0.0 <= r < 0.5):
        raise ValidationError([f"cell radius {r} outside [0, 1/2)"])
    if N < 8:
        raise ValidationError([f"cell resolution N={N} must be at least 8"])
    h = 1.0 / N
    e = -0.5 + np.arange(N + 1) * h
    X0, Y0 = np.meshgrid(e[:-1], e[:-1], indexing="ij")
    hole = disk_rect_area(X0, X0 + h, Y0, Y0 + h, r)
    volume = np.clip(h * h - hole, 0.0, h * h)
    volume[hole <= 0.0] = h * h
    volume[volume < 1e-14 * h * h] = 0.0
    ax = np.clip(h - chord_overlap(X0, Y0, Y0 + h, r), 0.0, h)
    ay = np.clip(h - chord_overlap(Y0, X0, X0 + h, r), 0.0, h)
    ax[ax < 1e-14 * h] = 0.0
    ay[ay < 1e-14 * h] = 0.0
    # cells with round-off volume but no wetted face are dry
    wetted = (ax > 0) | (np.roll(ax, -1, axis=0) > 0) | (ay > 0) | (np.roll(ay, -1, axis=1) > 0)
    volume[~wetted] = 0.0

    arc_normal = np.zeros((N, N, 2))
    if r > 0.0:
        cut = np.argwhere((hole > 0.0) & (volume > 0.0))
        if cut.size == 0:
            raise ResolutionTooCoarse(f"hole of radius {r} is not resolved by N={N}")
        for i, j in cut:
            pieces = _arc_pieces(e[i], e[i + 1], e[j], e[j + 1], r)
            if len(pieces) > 1 or any(p1 - p0 >= 2.0 * math.pi - 1e-12 for p0, p1 in pieces):
                raise ResolutionTooCoarse(
                    f"interface crosses cell ({i}, {j}) more than twice at N={N}, r={r}")
            for p0, p1 in pieces:
                arc_normal[i, j, 0] += r * (math.sin(p1) - math.sin(p0))
                arc_normal[i, j, 1] += r * (math.cos(p0) - math.cos(p1))

    unknown = _merge_and_number(volume, ax, ay, h)
    return CellMesh(r, N, volume, ax, ay, arc_normal, unknown, int(unknown.max()) + 1)


def _merge_and_number(volume, ax, ay, h):
    N = volume.shape[0]
    owner = -np.ones((N, N), dtype=np.int64)
    flat = np.arange(N * N).reshape(N, N)
    owner[volume > 0] = flat[volume > 0]
    tiny = np.argwhere((volume > 0) & (volume < TINY_VOLUME * h * h))
    for i, j in tiny:
        # apertures of left, right, bottom, top faces
        cand = [(ax[i, j], (i - 1) % N, j), (ax[(i + 1) % N, j], (i + 1) % N, j),
                (ay[i, j], i, (j - 1) % N), (ay[i, (j + 1) % N], i, (j + 1) % N)]
        cand = [c for c in cand if c[0] > 0 and volume[c[1], c[2]] > 0]
        if cand:
            _, ni, nj = max(cand, key=lambda c: c[0])
            owner[i, j] = flat[ni, nj]
    # resolve chains of merged cells to their final representative
    parent = owner.ravel().copy()
    for _ in range(8):
        valid = parent >= 0
        nxt = parent.copy()
        nxt[valid] = parent[parent[valid]]
        if np.array_equal(nxt, parent):
            break
        parent = nxt
    roots = np.unique(parent[parent >= 0])
    number = -np.ones(N * N, dtype=np.int64)
    number[roots] = np.arange(roots.size)
    unknown = np.where(parent >= 0, number[np.maximum(parent, 0)], -1)
    return unknown.reshape(N, N)


def _operator(mesh):
    rows, cols, vals = [], [], []
    for _, lo, hi, a, _ in mesh.faces():
        t = a / mesh.h
        rows += [lo, hi, lo, hi]
        cols += [lo, hi, hi, lo]
        vals += [t, t, -t, -t]
    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
    cols = np.concatenate(cols) if cols else np.zeros(0, dtype=int)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    return sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_unknowns,) * 2).tocsr()


def _gather(mesh, cellwise):
    out = np.zeros(mesh.n_unknowns)
    wet = mesh.unknown >= 0
    np.add.at(out, mesh.unknown[wet], cellwise[wet])
    return out


def _solve_periodic(A, b, mesh, tol, context):
    b = b - b.mean()
    try:
        x, iters = cg_solve(SparseSystem(A, b), tol=tol)
    except NoConvergence as exc:
        raise NoConvergence(exc.max_iter, exc.residual, context) from None
    vol = _gather(mesh, mesh.volume)
    x -= (vol @ x) / vol.sum()
    bn = np.linalg.norm(b)
    res = np.linalg.norm(A @ x - b) / bn if bn > 0 else 0.0
    return x, res


def _to_cells(mesh, x):
    out = np.zeros((mesh.N, mesh.N))
    wet = mesh.unknown >= 0
    out[wet] = x[mesh.unknown[wet]]
    return out


def _face_gradients(mesh, x):
    """Two-point gradients on x- and y-faces; zero on dry and merged faces."""
    g = []
    for d, lo, hi, a, ok in mesh.faces():
        gd = np.zeros((mesh.N, mesh.N))
        gd[ok] = (x[hi] - x[lo]) / mesh.h
        g.append(gd)
    return g


@dataclass
class CellSolution:
    """Correctors ``v_j`` (diffusion) and/or potentials ``pi_j`` with fluxes ``w_j``.

    ``w[j]`` holds the face-normal components ``(w_x on x-faces, w_y on
    y-faces)`` of ``grad + e_j``.
    """

    mesh: CellMesh
    v: tuple = None
    pi: tuple = None
    w: tuple = None
    residual: float = 0.0
    divergence: float = 0.0


def _fluxes(mesh, x, j):
    gx, gy = _face_gradients(mesh, x)
    wx = np.where(mesh.ax > 0, gx + (j == 0), 0.0)
    wy = np.where(mesh.ay > 0, gy + (j == 1), 0.0)
    return wx, wy


def _divergence(mesh, wx, wy):
    """Net outward flux ``sum_f a_f w_f`` per unknown."""
    N = mesh.N
    out_cell = (np.roll(mesh.ax * wx, -1, axis=0) - mesh.ax * wx
                + np.roll(mesh.ay * wy, -1, axis=1) - mesh.ay * wy)
    return _gather(mesh, out_cell)


def solve_diffusion_cell(mesh, tol=CELL_TOL):
    """Correctors for ``Lap v_j = 0``, ``nu.grad v_j = -nu.e_j`` on the hole.

    The interface data enter through the aperture balance: for a cut cell the
    interface integral of ``nu.e_j`` equals the net aperture ``a_hi - a_lo``
    in direction ``j``.
    """
    A = _operator(mesh)
    v, res = [], 0.0
    for j, a in enumerate((mesh.ax, mesh.ay)):
        net = np.roll(a, -1, axis=j) - a
        b = _gather(mesh, net)
        x, rj = _solve_periodic(A, b, mesh, tol, f"diffusion cell problem j={j + 1}, r={mesh.r}")
        v.append(x)
        res = max(res, rj)
    w = tuple(_fluxes(mesh, x, j) for j, x in enumerate(v))
    div = max(float(np.max(np.abs(_divergence(mesh, *wj)))) for wj in w)
    return CellSolution(mesh, v=tuple(v), w=w, residual=res, divergence=div)


def solve_flow_cell(mesh, tol=CELL_TOL):
    """Potential-flow cell problem with zero normal flux on the hole boundary.

    ``w_j = grad pi_j + e_j``, ``div w_j = 0``, ``nu.w_j = 0`` on the
    interface.  Interface data come from the exact arc integrals of the
    normal, independently of the aperture bookkeeping used by
    :func:`solve_diffusion_cell`.
    """
    A = _operator(mesh)
    pi, w, res = [], [], 0.0
    for j in range(2):
        b = _gather(mesh, mesh.arc_normal[..., j])
        x, rj = _solve_periodic(A, b, mesh, tol, f"flow cell problem j={j + 1}, r={mesh.r}")
        pi.append(x)
        w.append(_fluxes(mesh, x, j))
        res = max(res, rj)
    div = max(float(np.max(np.abs(_divergence(mesh, *wj)))) for wj in w)
    return CellSolution(mesh, pi=tuple(pi), w=tuple(w), residual=res, divergence=div)


@dataclass
class EffectiveCoefficients:
    r: float
    theta: float
    A: np.ndarray
    K: np.ndarray
    energy: np.ndarray
    residual: float = 0.0

    def row(self):
        return [self.r, self.theta, *self.A.ravel(), *self.K.ravel(), *self.energy, self.residual]


def _flux_integrals(mesh, w):
    """``M[i, j] = int e_i . w_j`` by face quadrature."""
    h = mesh.h
    M = np.zeros((2, 2))
    for j, (wx, wy) in enumerate(w):
        M[0, j] = np.sum(mesh.ax * wx) * h
        M[1, j] = np.sum(mesh.ay * wy) * h
    return M


def effective_coefficients(mesh, diffusion, flow=None):
    """Porosity (analytic), ``A``, ``K`` and the energies ``int |e_j + grad v_j|^2``.

    ``a_ij = int (delta_ij + d_i v_j)`` and ``k_ij = int w_j . e_i`` are both
    evaluated with the face quadrature ``sum_f a_f h (.)``.  Without a flow
    solution ``K`` is left as NaN.
    """
    h = mesh.h
    A = _flux_integrals(mesh, diffusion.w)
    energy = np.array([np.sum(mesh.ax * wx ** 2 + mesh.ay * wy ** 2) * h for wx, wy in diffusion.w])
    if flow is not None:
        K = _flux_integrals(mesh, flow.w)
        res = max(diffusion.residual, flow.residual)
    else:
        K = np.full((2, 2), np.nan)
        res = diffusion.residual
    return EffectiveCoefficients(mesh.r, float(porosity(mesh.r)), A, K, energy, res)


def cell_coefficients(r, N):
    mesh = build_cell_mesh(r, N)
    return effective_coefficients(mesh, solve_diffusion_cell(mesh), solve_flow_cell(mesh))


@dataclass
class CoefficientTables:
    rows: list
    theta: object
    a11: InterpTable
    k11: InterpTable

    @property
    def r(self):
        return np.array([c.r for c in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(CSV_HEADER)
            for c in self.rows:
                out.writerow([format(float(v), ".17g") for v in c.row()])


def tabulate_coefficients(r_grid, N, threads=1):
    """Solve the cell problems for every radius and build interpolation tables.

    Results are gathered in ``r_grid`` order, so the output does not depend
    on the number of worker threads.
    """
    r_grid = np.asarray(r_grid, dtype=float)
    if r_grid.ndim != 1 or r_grid.size == 0 or np.any(np.diff(r_grid) <= 0):
        raise ValidationError(["r_grid must be a non-empty strictly increasing list"])

    def one(r):
        try:
            return cell_coefficients(r, N)
        except Exception as exc:
            exc.args = (f"r={r}: {exc}",)
            raise

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, r_grid))
    else:
        rows = [one(r) for r in r_grid]
    return CoefficientTables(
        rows=rows,
        theta=porosity,
        a11=InterpTable(r_grid, [c.A[0, 0] for c in rows]),
        k11=InterpTable(r_grid, [c.K[0, 0] for c in rows]),
    )


def read_coefficients_csv(path):
    """Load a ``coefficients.csv`` written by :meth:`CoefficientTables.write_csv`."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            v = {k: float(x) for k, x in rec.items()}
            rows.append(EffectiveCoefficients(
                v["r"], v["theta"],
                np.array([[v["a11"], v["a12"]], [v["a21"], v["a22"]]]),
                np.array([[v["k11"], v["k12"]], [v["k21"], v["k22"]]]),
                np.array([v["energy1"], v["energy2"]]), v["residual"]))
    r = [c.r for c in rows]
    return CoefficientTables(rows, porosity, InterpTable(r, [c.A[0, 0] for c in rows]),
                             InterpTable(r, [c.K[0, 0] for c in rows]))
