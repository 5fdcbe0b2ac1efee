"""Two-scale (distributed-microstructure) transport.

Every macro cell ``c`` owns a disk ``B(x_c)`` of radius ``r_c`` (in cell
units) on which the micro concentration ``v`` diffuses with ``D_l`` and
takes the macro value ``u_c`` on the rim.  The macro balance reads

    theta du/dt - div(D_h A grad u - q u) = -f,

with ``f`` the rate at which mass enters the disks.  Both scales use backward
Euler; they are coupled by a fixed-point iteration per time step (macro
solve with frozen exchange rate, micro solves with frozen rim value, rate
update).

Micro discretisation: vertex-centred radial finite volumes with nodes
``rho_k = k r / K``.  Node 0 owns ``[0, rho_1/2]`` (its inner face has zero
area), node ``K`` sits on the rim and carries the half annulus next to it.
"""
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import CouplingDiverged, InvalidData
from .macroflow import SIDES, boundary_cells, boundary_transmissibility, face_harmonic, zero_flow
from .numerics import tridiag_solve

log = logging.getLogger(__name__)

BOUND_TOL = 1e-12


def as_field(value):
    return value if callable(value) else (lambda *args, _v=float(value): _v)


@dataclass
class TransportConfig:
    """Physical data and numerical controls of the two-scale run.

    ``u_b(points, t)``, ``u_I(points)`` and ``v_I(x, y)`` may be callables or
    scalars; ``v_I`` receives macro points ``x`` of shape ``(n, 2)`` and cell
    points ``y`` of shape ``(n, m, 2)``.  ``boundary`` maps each side to
    ``"dirichlet"`` or ``"noflux"``.
    """

    D_h: float = 1.0
    D_l: float = 1.0
    kappa: float = 1.0
    u_b: object = 0.0
    u_I: object = 0.0
    v_I: object = 0.0
    T: float = 1.0
    dt: float = 1e-2
    n_radial: int = 32
    boundary: dict = field(default_factory=lambda: {s: "dirichlet" for s in SIDES})
    coupling_tol: float = 1e-11
    max_coupling_iter: int = 200
    epochs: tuple = ()
    threads: int = 1

    def violations(self):
        out = []
        for name in ("D_h", "D_l", "kappa"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive (positivity assumption on the data), got {getattr(self, name)}")
        if not self.dt > 0:
            out.append(f"dt must be positive, got {self.dt}")
        if not self.T >= 0:
            out.append(f"T must be non-negative, got {self.T}")
        if self.n_radial < 2:
            out.append(f"n_radial must be at least 2, got {self.n_radial}")
        if not self.coupling_tol > 0:
            out.append("coupling_tol must be positive")
        for side in SIDES:
            kind = self.boundary.get(side, "dirichlet")
            if kind not in ("dirichlet", "noflux"):
                out.append(f"boundary kind {kind!r} on {side} must be 'dirichlet' or 'noflux'")
        return out

    @property
    def n_steps(self):
        n = int(round(self.T / self.dt))
        if abs(n * self.dt - self.T) > 1e-9 * max(self.T, 1.0):
            raise InvalidData(f"T={self.T} is not an integer multiple of dt={self.dt}")
        return n


def boundary_samples(cfg, grid, n_times=11):
    """``u_b`` sampled on all boundary face centres at ``n_times`` instants."""
    ub = as_field(cfg.u_b)
    ts = np.linspace(0.0, cfg.T, n_times) if cfg.T > 0 else np.zeros(1)
    vals = []
    for t in ts:
        vals.append(np.concatenate([np.broadcast_to(ub(grid.boundary_points(s), t),
                                                    (grid.boundary_points(s).shape[0],))
                                    for s in SIDES]))
    return ts, np.array(vals)


def ub_nonincreasing(cfg, grid):
    """Sampled check of ``d u_b / dt <= 0``."""
    _, vals = boundary_samples(cfg, grid)
    return bool(np.all(np.diff(vals, axis=0) <= 1e-14))


@dataclass
class MicroProfiles:
    """Radial micro profiles, one row per macro cell; ``v[:, -1]`` is the rim."""

    r: np.ndarray
    v: np.ndarray

    @property
    def K(self):
        return self.v.shape[1] - 1

    def nodes(self):
        return self.r[:, None] * np.arange(self.K + 1)[None, :] / self.K

    def volumes(self):
        K = self.K
        dr = self.r / K
        edge = (np.arange(K) + 0.5)[None, :] * dr[:, None]
        outer = np.concatenate([edge, self.r[:, None]], axis=1)
        inner = np.concatenate([np.zeros_like(self.r)[:, None], edge], axis=1)
        return math.pi * (outer ** 2 - inner ** 2)

    def transmissibility(self, D_l):
        # 2 pi rho_{k+1/2} / d_rho does not depend on r
        return D_l * 2.0 * math.pi * (np.arange(self.K) + 0.5)

    def mass(self):
        return np.sum(self.volumes() * self.v, axis=1)

    def copy(self):
        return MicroProfiles(self.r.copy(), self.v.copy())


def _micro_solve(v, vol, tr, u_trace, dt):
    K = v.shape[1] - 1
    n = v.shape[0]
    lower = np.zeros((n, K))
    upper = np.zeros((n, K))
    diag = vol[:, :K] / dt
    diag = diag + tr[None, :]
    diag[:, 1:] += tr[None, :-1]
    lower[:, 1:] = -tr[None, :-1]
    upper[:, :-1] = -tr[None, :-1]
    rhs = vol[:, :K] * v[:, :K] / dt
    rhs[:, -1] += tr[-1] * u_trace
    out = np.empty_like(v)
    out[:, :K] = tridiag_solve(lower, diag, upper, rhs)
    out[:, K] = u_trace
    return out


def micro_step(profiles, u_trace, D_l, dt, pool=None, chunks=1):
    """Backward-Euler step of ``dv/dt = D_l (1/rho) d/drho(rho dv/drho)``.

    Returns the new profiles and the exchange rate ``(mass_new - mass_old)/dt``
    per cell, which is positive when mass enters the disk.
    """
    u_trace = np.broadcast_to(np.asarray(u_trace, dtype=float), profiles.r.shape)
    vol = profiles.volumes()
    tr = profiles.transmissibility(D_l)
    if pool is not None and chunks > 1 and profiles.r.size > chunks:
        parts = np.array_split(np.arange(profiles.r.size), chunks)
        results = pool.map(lambda s: _micro_solve(profiles.v[s], vol[s], tr, u_trace[s], dt), parts)
        v_new = np.concatenate(list(results), axis=0)
    else:
        v_new = _micro_solve(profiles.v, vol, tr, u_trace, dt)
    flux = (np.sum(vol * v_new, axis=1) - np.sum(vol * profiles.v, axis=1)) / dt
    return MicroProfiles(profiles.r, v_new), flux


@dataclass
class TwoScaleState:
    t: float
    u: np.ndarray
    micro: MicroProfiles
    flux: np.ndarray
    iterations: int = 0
    trace: tuple = ()       # coupling increments of the step that produced this state

    def total_mass(self, grid):
        return grid.cell_volume * float(np.sum(grid.theta.ravel() * self.u + self.micro.mass()))


class MacroOperator:
    """Implicit macro transport operator for a fixed grid, flow and step.

    The system matrix (storage, diffusion with ``D_h a11`` harmonically
    averaged, first-order upwind advection, Dirichlet faces) is factorised
    once.  It is not symmetric when ``q != 0``, hence a sparse LU.
    """

    def __init__(self, grid, flow, cfg, dt):
        self.grid, self.flow, self.cfg, self.dt = grid, flow, cfg, dt
        M1, M2 = grid.shape
        n = M1 * M2
        dx, dy = grid.dx, grid.dy
        vol = grid.cell_volume
        idx = np.arange(n).reshape(M1, M2)
        lam = cfg.D_h * grid.a11
        self.tx, self.ty = face_harmonic(lam, dx, dy)

        rows, cols, vals = [np.arange(n)], [np.arange(n)], [vol * grid.theta.ravel() / dt]

        def couple(lo, hi, t):
            rows.extend([lo, hi, lo, hi])
            cols.extend([lo, hi, hi, lo])
            vals.extend([t, t, -t, -t])

        couple(idx[:-1].ravel(), idx[1:].ravel(), self.tx.ravel())
        couple(idx[:, :-1].ravel(), idx[:, 1:].ravel(), self.ty.ravel())

        def upwind(lo, hi, F):
            pos, neg = np.maximum(F, 0.0), np.minimum(F, 0.0)
            rows.extend([lo, lo, hi, hi])
            cols.extend([lo, hi, lo, hi])
            vals.extend([pos, neg, -pos, -neg])

        upwind(idx[:-1].ravel(), idx[1:].ravel(), (flow.qx[1:-1] * dy).ravel())
        upwind(idx[:, :-1].ravel(), idx[:, 1:].ravel(), (flow.qy[:, 1:-1] * dx).ravel())

        self.sides = {}
        for side in SIDES:
            cells = boundary_cells(grid.shape, side)
            length = dy if side in ("left", "right") else dx
            F = flow.outward_flux(side) * length
            dirichlet = cfg.boundary.get(side, "dirichlet") == "dirichlet"
            tb = boundary_transmissibility(lam, side, dx, dy) if dirichlet else np.zeros(cells.size)
            rows.append(cells)
            cols.append(cells)
            vals.append(tb + np.maximum(F, 0.0))
            self.sides[side] = (cells, tb, F)

        A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n)).tocsc()
        self.matrix = A
        self._lu = splu(A)
        self._ub = as_field(cfg.u_b)

    def boundary_values(self, side, t):
        pts = self.grid.boundary_points(side)
        return np.broadcast_to(np.asarray(self._ub(pts, t), dtype=float), pts.shape[:1])

    def base_rhs(self, u_old, t_new):
        g = self.grid
        rhs = g.cell_volume * g.theta.ravel() * u_old / self.dt
        for side, (cells, tb, F) in self.sides.items():
            ub = self.boundary_values(side, t_new)
            rhs[cells] += tb * ub - np.minimum(F, 0.0) * ub
        return rhs

    def solve(self, rhs):
        return self._lu.solve(rhs)

    def boundary_outflow(self, u, t):
        """Mass leaving through the boundary per unit time (diffusive + advective)."""
        total = 0.0
        for side, (cells, tb, F) in self.sides.items():
            ub = self.boundary_values(side, t)
            uc = u[cells]
            total += float(np.sum(tb * (uc - ub) + np.maximum(F, 0.0) * uc + np.minimum(F, 0.0) * ub))
        return total

    def dissipation(self, u):
        M1, M2 = self.grid.shape
        U = u.reshape(M1, M2)
        return float(np.sum(self.tx * (U[1:] - U[:-1]) ** 2) + np.sum(self.ty * (U[:, 1:] - U[:, :-1]) ** 2))


def _cell_average(func, grid, sub=4):
    X, Y = grid.centers()
    offs = (np.arange(sub) + 0.5) / sub - 0.5
    acc = np.zeros(X.shape)
    for a in offs:
        for b in offs:
            pts = np.stack([X + a * grid.dx, Y + b * grid.dy], axis=-1)
            acc += np.broadcast_to(np.asarray(func(pts), dtype=float), X.shape)
    return acc / sub ** 2


def init_state(grid, cfg, n_angle=16):
    """Initial macro cell averages and radially averaged micro profiles.

    The rim value of each profile is reset to the macro value; the change is
    logged when it exceeds ``1e-12``.
    """
    problems = cfg.violations()
    if problems:
        raise InvalidData("; ".join(problems))
    u = _cell_average(as_field(cfg.u_I), grid).ravel()
    if not np.all(np.isfinite(u)) or np.any(u < 0):
        raise InvalidData("initial macro data u_I must be finite and non-negative")
    r = grid.r.ravel()
    K = cfg.n_radial
    rho = r[:, None] * np.arange(K + 1)[None, :] / K
    phi = 2.0 * math.pi * (np.arange(n_angle) + 0.5) / n_angle
    X, Y = grid.centers()
    x = np.stack([X.ravel(), Y.ravel()], axis=-1)
    y = np.stack([rho[..., None] * np.cos(phi), rho[..., None] * np.sin(phi)], axis=-1)
    vI = as_field(cfg.v_I)
    samples = np.empty(y.shape[:-1])
    for k in range(K + 1):
        samples[:, k] = np.broadcast_to(np.asarray(vI(x, y[:, k]), dtype=float), samples[:, k].shape)
    v = samples.mean(axis=-1)
    if not np.all(np.isfinite(samples)) or np.any(samples < 0):
        raise InvalidData("initial micro data v_I must be finite and non-negative")
    spread = float(np.max(np.abs(samples - v[..., None])))
    if spread > 1e-12:
        log.warning("v_I is not radially symmetric (max deviation %.3e); using its angular average", spread)
    change = float(np.max(np.abs(v[:, K] - u), initial=0.0))
    if change > 1e-12:
        log.info("rim values of v_I reset to u_I (max change %.3e)", change)
    v[:, K] = u
    return TwoScaleState(0.0, u, MicroProfiles(r.copy(), v), np.zeros_like(u))


def data_bounds(grid, cfg):
    """``(M1, M2)``: sup-norm bounds from initial and boundary data."""
    st = init_state(grid, cfg)
    _, ub = boundary_samples(cfg, grid)
    used = [s for s in SIDES if cfg.boundary.get(s, "dirichlet") == "dirichlet"]
    m1 = float(max(np.max(st.u, initial=0.0), np.max(ub, initial=0.0) if used else 0.0))
    m2 = float(max(np.max(st.micro.v[:, :-1], initial=0.0), m1))
    return m1, m2


def macro_step(state, flow, fluxes, cfg, dt, op=None):
    """Backward-Euler macro update with a frozen per-cell exchange rate."""
    op = MacroOperator(flow.grid, flow, cfg, dt) if op is None else op
    rhs = op.base_rhs(state.u, state.t + dt) - op.grid.cell_volume * np.asarray(fluxes, dtype=float)
    return op.solve(rhs)


def coupled_step(state, flow, cfg, dt, op=None, pool=None, relax=1.0):
    """One time step of the coupled problem.

    Iterates macro solve -> micro solves -> exchange-rate update until two
    successive macro iterates differ by at most ``cfg.coupling_tol`` (max
    norm).  On divergence the step is retried once with relaxation 0.5.
    ``op`` is a prefactorised :class:`MacroOperator` for this ``dt``.
    """
    op = MacroOperator(flow.grid, flow, cfg, dt) if op is None else op
    chunks = max(1, cfg.threads)
    f_used = state.flux.copy()
    u = macro_step(state, flow, f_used, cfg, dt, op)
    micro, f_new = micro_step(state.micro, u, cfg.D_l, dt, pool, chunks)
    trace = []
    for it in range(1, cfg.max_coupling_iter + 1):
        f_used = relax * f_new + (1.0 - relax) * f_used
        u_next = macro_step(state, flow, f_used, cfg, dt, op)
        delta = float(np.max(np.abs(u_next - u)))
        trace.append(delta)
        u = u_next
        micro, f_new = micro_step(state.micro, u, cfg.D_l, dt, pool, chunks)
        if delta <= cfg.coupling_tol:
            return TwoScaleState(state.t + dt, u, micro, f_new, it, tuple(trace))
        if not np.isfinite(delta) or (it > 5 and delta > 1e3 * max(trace[0], cfg.coupling_tol)):
            break
    if relax == 1.0:
        log.warning("coupling did not converge at t=%g; retrying with relaxation 0.5", state.t + dt)
        return coupled_step(state, flow, cfg, dt, op, pool, relax=0.5)
    raise CouplingDiverged(f"coupling iteration failed at t={state.t + dt:g}", trace)


def l2_distance(a, b, grid):
    """Capacity-weighted L2 distance between two states (macro + micro)."""
    du = a.u - b.u
    dv = a.micro.v - b.micro.v
    vol = a.micro.volumes()
    return math.sqrt(grid.cell_volume * float(np.sum(grid.theta.ravel() * du ** 2)
                                              + np.sum(vol * dv ** 2)))


AUDIT_HEADER = ["t", "total_mass", "mass_drift", "u_min", "u_max", "v_min", "v_max", "energy",
                "coupling_iters"]


@dataclass
class RunResult:
    grid: object
    snapshots: dict
    audit: list
    bounds: tuple
    ub_monotone: bool
    final: TwoScaleState

    @property
    def max_relative_drift(self):
        m0 = max(abs(self.audit[0]["total_mass"]), 1e-300)
        return max(abs(row["mass_drift"]) for row in self.audit) / m0

    def bound_violations(self):
        m1, m2 = self.bounds
        out = []
        for row in self.audit:
            if row["u_min"] < -BOUND_TOL or row["u_max"] > m1 + BOUND_TOL:
                out.append(f"t={row['t']:g}: u in [{row['u_min']:.3e}, {row['u_max']:.3e}], M1={m1:g}")
            if row["v_min"] < -BOUND_TOL or row["v_max"] > m2 + BOUND_TOL:
                out.append(f"t={row['t']:g}: v in [{row['v_min']:.3e}, {row['v_max']:.3e}], M2={m2:g}")
        return out

    def write_audit(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(AUDIT_HEADER)
            for row in self.audit:
                out.writerow([row["t"]] + [format(float(row[k]), ".17g") for k in AUDIT_HEADER[1:-1]]
                             + [row["coupling_iters"]])

    def write_snapshot(self, path, state):
        write_snapshot(path, self.grid, state)


def write_snapshot(path, grid, state):
    X, Y = grid.centers()
    M1, M2 = grid.shape
    v = state.micro.v
    K = v.shape[1] - 1
    mm = state.micro.mass()
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["i", "j", "x1", "x2", "u", "micro_mass", "v_center", "v_mid", "v_trace"])
        for i in range(M1):
            for j in range(M2):
                c = i * M2 + j
                out.writerow([i, j] + [format(float(x), ".17g") for x in
                                       (X[i, j], Y[i, j], state.u[c], mm[c], v[c, 0], v[c, K // 2],
                                        v[c, K])])


def _audit_row(state, grid, op, m0, outflow_acc, energy_acc):
    total = state.total_mass(grid)
    v = state.micro.v
    energy = (grid.cell_volume * float(np.sum(grid.theta.ravel() * state.u ** 2)
                                       + np.sum(state.micro.volumes() * v ** 2)) + energy_acc)
    return {"t": state.t, "total_mass": total, "mass_drift": total - (m0 - outflow_acc),
            "u_min": float(state.u.min()), "u_max": float(state.u.max()),
            "v_min": float(v.min()), "v_max": float(v.max()), "energy": energy,
            "coupling_iters": state.iterations}


def run(grid, cfg, flow=None, callback=None):
    """Integrate from ``t = 0`` to ``cfg.T`` with a fixed step.

    Snapshots are kept at ``t = 0`` and at every time in ``cfg.epochs``.  The
    audit has one row per step: total mass and its drift against the
    accumulated boundary outflow, extrema of ``u`` and ``v``, and the energy
    functional ``||u||^2 + ||v||^2 + int D|grad u|^2 dt``.
    """
    flow = zero_flow(grid) if flow is None else flow
    state = init_state(grid, cfg)
    bounds = data_bounds(grid, cfg)
    monotone = ub_nonincreasing(cfg, grid)
    if not monotone:
        log.warning("boundary data increase in time; maximum-principle audit is advisory only")
    n_steps = cfg.n_steps
    op = MacroOperator(grid, flow, cfg, cfg.dt)
    m0 = state.total_mass(grid)
    epoch_steps = {int(round(e / cfg.dt)): e for e in cfg.epochs if 0 < e <= cfg.T + 1e-12}
    snapshots = {0.0: state}
    audit = [_audit_row(state, grid, op, m0, 0.0, 0.0)]
    outflow_acc = energy_acc = 0.0
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for step in range(1, n_steps + 1):
            new = coupled_step(state, flow, cfg, cfg.dt, op, pool)
            new = replace(new, t=step * cfg.dt)
            outflow_acc += cfg.dt * op.boundary_outflow(new.u, new.t)
            energy_acc += cfg.dt * op.dissipation(new.u)
            state = new
            audit.append(_audit_row(state, grid, op, m0, outflow_acc, energy_acc))
            if step in epoch_steps:
                snapshots[epoch_steps[step]] = state
            if callback is not None:
                callback(step, state)
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(grid, snapshots, audit, bounds, monotone, state)
