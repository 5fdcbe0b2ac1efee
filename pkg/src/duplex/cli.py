"""Command line entry point: ``duplex <subcommand> <config> [--threads N] [--out DIR]``.

Exit status: 0 on success, 2 when a run finished but its audit failed,
1 on any error.
"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import cell, geometry, macroflow, reference, twoscale
from .config import parse_config
from .errors import DuplexError, ValidationError

log = logging.getLogger("duplex")

EXIT_OK, EXIT_ERROR, EXIT_AUDIT = 0, 1, 2
LEVELSET_MIN_ORDER = 2.7
FLOW_DIV_TOL = 1e-10
MASS_DRIFT_TOL = 1e-9
FINE_DRIFT_TOL = 1e-10


def _epoch_name(prefix, t):
    return f"{prefix}_t{t:g}.csv"


def _tables(cfg, threads):
    return cell.tabulate_coefficients(cfg.r_grid, cfg.N, threads=threads)


def _macro_grid(cfg, threads):
    return macroflow.MacroGrid.from_radius(cfg.radius, cfg.macro_shape, _tables(cfg, threads))


def _flow(cfg, grid):
    return macroflow.solve_flow(grid, cfg.kappa, cfg.flow_bc)


def cmd_cell_table(cfg, out, threads):
    tables = _tables(cfg, threads)
    tables.write_csv(out / "coefficients.csv")
    r = tables.r
    theta_ok = all(c.theta == geometry.porosity(c.r) for c in tables.rows)
    gap = max(float(np.max(np.abs(c.K - c.A))) for c in tables.rows)
    res = max(c.residual for c in tables.rows)
    ok = theta_ok and gap <= 1e-6 and res <= cell.CELL_TOL
    print(f"cell-table: {r.size} radii in [{r[0]:g}, {r[-1]:g}], N={cfg.N}, theta exact={theta_ok}, "
          f"max|K-A|={gap:.2e}, max residual={res:.2e}")
    return EXIT_OK if ok else EXIT_AUDIT


def cmd_flow(cfg, out, threads):
    grid = _macro_grid(cfg, threads)
    flow = _flow(cfg, grid)
    flow.write_csv(out / "flow.csv")
    div = flow.max_divergence()
    print(f"flow: {grid.shape[0]}x{grid.shape[1]} cells, max|div q|={div:.2e}, "
          f"max face speed={macroflow.max_face_speed(flow):.4g}, CG iterations={flow.iterations}")
    return EXIT_OK if div <= FLOW_DIV_TOL else EXIT_AUDIT


def twoscale_audit(result):
    """List of audit failures of a two-scale run (empty when it passed)."""
    problems = []
    drift = result.max_relative_drift
    if drift > MASS_DRIFT_TOL:
        problems.append(f"relative mass drift {drift:.3e} exceeds {MASS_DRIFT_TOL:g}")
    bounds = result.bound_violations()
    if bounds:
        if result.ub_monotone:
            problems.extend(bounds[:5])
        else:
            log.warning("maximum-principle audit (advisory, u_b increases): %s", bounds[0])
    return problems


def cmd_twoscale(cfg, out, threads):
    grid = _macro_grid(cfg, threads)
    flow = _flow(cfg, grid)
    result = twoscale.run(grid, cfg.transport, flow)
    for t, state in result.snapshots.items():
        twoscale.write_snapshot(out / _epoch_name("state", t), grid, state)
    result.write_audit(out / "audit.csv")
    problems = twoscale_audit(result)
    iters = max(row["coupling_iters"] for row in result.audit)
    print(f"twoscale: {len(result.audit) - 1} steps, max relative mass drift={result.max_relative_drift:.2e}, "
          f"max coupling iterations={iters}, bounds M1={result.bounds[0]:g} M2={result.bounds[1]:g}, "
          f"audit={'ok' if not problems else 'FAILED'}")
    for p in problems:
        print(f"  audit: {p}")
    return EXIT_OK if not problems else EXIT_AUDIT


def cmd_reference(cfg, out, threads):
    tcfg = cfg.reference_transport()
    strip = reference.invariant_in_x2(tcfg, cfg.extents)
    if strip:
        log.info("data do not depend on x2: solving on a strip one period tall")
    status = EXIT_OK
    for eps in cfg.ref_eps:
        radius = geometry.constant(cfg.ref_r0, domain=reference.study_domain(cfg.extents, eps, strip))
        fine = reference.run_reference(reference.build_fine_grid(radius, eps, cfg.cells_per_period), tcfg)
        sub = out / f"eps_{round(1 / eps)}"
        sub.mkdir(parents=True, exist_ok=True)
        for t in fine.snapshots:
            fine.write_snapshot(sub / _epoch_name("reference", t), t)
        drift = fine.max_relative_drift()
        lo = min(float(s.min()) for s in fine.snapshots.values())
        hi = max(float(s.max()) for s in fine.snapshots.values())
        print(f"reference: eps=1/{round(1 / eps)}, {fine.grid.shape[0]}x{fine.grid.shape[1]} cells, "
              f"relative mass drift={drift:.2e}, range=[{lo:.6g}, {hi:.6g}]")
        if drift > FINE_DRIFT_TOL:
            status = EXIT_AUDIT
    return status


def cmd_compare(cfg, out, threads):
    tcfg = cfg.reference_transport()
    a11 = cell.cell_coefficients(cfg.ref_r0, cfg.N).A[0, 0]
    table, _, _ = reference.convergence_study(cfg.ref_r0, cfg.ref_eps, cfg.cells_per_period, tcfg,
                                              cfg.ref_shape, a11, cfg.extents, threads)
    table.write_csv(out / "convergence.csv")
    final = max(row[1] for row in table.rows)
    errs = ", ".join(f"1/{round(1 / row[0])}: {row[2]:.3e}" for row in table.rows if row[1] == final)
    ok = reference.is_decreasing(table, final)
    print(f"compare: L2 error at t={final:g} -> {errs}; decreasing in eps: {ok}")
    return EXIT_OK if ok else EXIT_AUDIT


def cmd_levelset_check(cfg, out, threads):
    order = geometry.expansion_residual_order(cfg.radius, list(cfg.check_eps))
    print(f"levelset-check: fitted expansion order {order:.3f} over eps={list(cfg.check_eps)} "
          f"(required >= {LEVELSET_MIN_ORDER})")
    return EXIT_OK if order >= LEVELSET_MIN_ORDER else EXIT_AUDIT


COMMANDS = {
    "cell-table": cmd_cell_table,
    "flow": cmd_flow,
    "twoscale": cmd_twoscale,
    "reference": cmd_reference,
    "compare": cmd_compare,
    "levelset-check": cmd_levelset_check,
}


def dispatch(subcommand, cfg, out=None, threads=1):
    out = Path(out) if out is not None else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg = cfg.with_threads(threads)
    for w in cfg.warnings:
        log.warning(w)
    return COMMANDS[subcommand](cfg, out, threads)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="duplex", description="Cell problems, Darcy flow and two-scale transport in perforated media.")
    parser.add_argument("subcommand", choices=sorted(COMMANDS))
    parser.add_argument("config", type=Path)
    parser.add_argument("--threads", type=int, default=1, help="cap on worker threads (default 1)")
    parser.add_argument("--out", type=Path, default=None, help="output directory (overrides [output] dir)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_ERROR
    try:
        cfg = parse_config(args.config)
        return dispatch(args.subcommand, cfg, args.out, args.threads)
    except ValidationError as exc:
        print(f"error: invalid configuration {args.config}:", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return EXIT_ERROR
    except DuplexError as exc:
        print(f"error [{args.subcommand}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        print(f"error [{args.subcommand}]: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
