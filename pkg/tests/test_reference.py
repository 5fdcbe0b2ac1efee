import math

import numpy as np
import pytest

from duplex.config import parse_field
from duplex.errors import GridMismatch, HoleOnBoundary, HolesTouch, InvalidData
from duplex.geometry import constant, levelset_exact, sine
from duplex.macroflow import MacroGrid
from duplex.reference import (build_fine_grid, compare_to_twoscale, convergence_study, fluid_average,
                              invariant_in_x2, is_decreasing, run_reference, study_domain)
from duplex.twoscale import TransportConfig, run

from oracles import square_heat_mode

NOFLUX = {s: "noflux" for s in ("left", "right", "bottom", "top")}
SLAB = dict(NOFLUX, left="dirichlet")


def test_no_holes_gives_all_fluid():
    grid = build_fine_grid(constant(0.0), 1 / 4, 16)
    assert not grid.hole.any()
    assert np.all(grid.fluid_fraction == 1.0)
    assert grid.shape == (64, 64) and grid.n_periods == (4, 4)


def test_hole_fraction_matches_disk_area():
    grid = build_fine_grid(constant(0.25), 1 / 4, 32)
    exact = grid.period_view(1.0 - grid.fluid_fraction).mean(axis=(2, 3))
    np.testing.assert_allclose(exact, math.pi / 16, rtol=0.02)
    np.testing.assert_allclose(exact, math.pi / 16, rtol=1e-12)
    # the raw label count is a lattice-point count: 208 of 1024 cells
    np.testing.assert_array_equal(grid.hole_fraction(), 208 / 1024)


def test_label_count_converges_to_disk_area():
    errs = [abs(build_fine_grid(constant(0.3), 1 / 4, m).hole_fraction()[0, 0] / (0.09 * math.pi) - 1)
            for m in (32, 64, 128)]
    assert errs[-1] < 1e-3 and errs[-1] < errs[0]


def test_phase_labels_follow_levelset_sign():
    r = sine(0.25, 0.1, 1.0)
    grid = build_fine_grid(r, 1 / 8, 16)
    X, Y = grid.centers()
    S = levelset_exact(np.stack([X, Y], -1), 1 / 8, r, shift=1 / 16)
    assert np.array_equal(grid.hole, S > 0)


def test_geometry_guards():
    with pytest.raises(HolesTouch):
        build_fine_grid(constant(0.49), 1 / 4, 32, margin=0.005)
    with pytest.raises(HoleOnBoundary):
        build_fine_grid(constant(0.3), 1 / 4, 32, shift=0.0)
    with pytest.raises(GridMismatch):
        build_fine_grid(constant(0.3), 0.3, 32)
    with pytest.raises(GridMismatch):
        build_fine_grid(constant(0.3), 1 / 4, 8)
    with pytest.raises(GridMismatch):
        build_fine_grid(constant(0.3, domain=(0.0, 1.0, 0.0, 0.3)), 1 / 4, 16)
    with pytest.raises(ValueError):
        build_fine_grid(constant(0.3), 1 / 4, 16, faces="smooth")


def test_heat_mode_against_series():
    def u0(p):
        return np.sin(math.pi * p[..., 0]) * np.sin(math.pi * p[..., 1])

    cfg = TransportConfig(u_b=0.0, u_I=u0, v_I=0.0, dt=2e-5, T=0.1, epochs=(0.1,))
    fine = run_reference(build_fine_grid(constant(0.0), 1 / 8, 16), cfg)
    X, Y = fine.grid.centers()
    err = np.max(np.abs(fine.snapshots[0.1] - square_heat_mode(X, Y, 0.1)))
    assert err <= 1e-4


def test_constant_state_is_steady():
    c = 0.45
    cfg = TransportConfig(u_b=c, u_I=c, v_I=c, D_l=0.3, dt=0.01, T=0.05)
    fine = run_reference(build_fine_grid(constant(0.3), 1 / 4, 16), cfg)
    np.testing.assert_allclose(fine.snapshots[0.0], c, rtol=0, atol=0)
    assert len(fine.mass) == 6
    for m in fine.mass:
        assert m == pytest.approx(c, rel=1e-12)


@pytest.mark.parametrize("faces", ["exact", "staircase"])
def test_mass_and_bounds(faces):
    cfg = TransportConfig(u_I=parse_field("gauss: 1, 0.4, 0.5, 0.2", "initial"), v_I=0.1, D_l=0.5,
                          dt=0.01, T=0.2, epochs=(0.1, 0.2), boundary=NOFLUX)
    fine = run_reference(build_fine_grid(sine(0.25, 0.1, 1.0), 1 / 8, 16, faces=faces), cfg)
    assert fine.max_relative_drift() <= 1e-10
    top = fine.snapshots[0.0].max()
    for u in fine.snapshots.values():
        assert u.min() >= -1e-12 and u.max() <= top + 1e-12


def test_dirichlet_outflow_is_accounted():
    cfg = TransportConfig(u_b=parse_field("decay: 1, 2", "boundary"), u_I=0.0, v_I=0.0, dt=0.01, T=0.1,
                          boundary=SLAB)
    fine = run_reference(build_fine_grid(constant(0.3), 1 / 4, 16), cfg)
    assert fine.mass[-1] > 0
    assert fine.max_relative_drift() <= 1e-10


def test_advection_requires_plain_medium():
    cfg = TransportConfig(dt=0.01, T=0.01)
    with pytest.raises(InvalidData):
        run_reference(build_fine_grid(constant(0.3), 1 / 4, 16), cfg, q=(1.0, 0.0))


def test_plain_medium_matches_twoscale_exactly():
    # with no holes the fine and macro schemes coincide on a common grid
    cfg = TransportConfig(u_I=parse_field("step: 1, 0, 0.5", "initial"), v_I=0.0, u_b=0.0,
                          dt=0.01, T=0.1, epochs=(0.05, 0.1), n_radial=8)
    fine = run_reference(build_fine_grid(constant(0.0), 1 / 4, 16), cfg)
    ts = run(MacroGrid.homogeneous((0.0, 1.0, 0.0, 1.0), (64, 64)), cfg)
    assert np.array_equal(fine.snapshots[0.1], ts.snapshots[0.1].u.reshape(64, 64))
    table = compare_to_twoscale(fine, ts)
    assert table.errors() == [0.0, 0.0, 0.0]
    assert math.isnan(table.rows[0][3])


def test_strip_reduction_matches_full_square():
    cfg = TransportConfig(u_b=1.0, u_I=0.0, v_I=0.0, D_l=0.5, dt=0.01, T=0.05, epochs=(0.05,),
                          boundary=SLAB)
    assert invariant_in_x2(cfg, (0.0, 1.0, 0.0, 1.0))
    full = run_reference(build_fine_grid(constant(0.3), 1 / 4, 16), cfg)
    strip_r = constant(0.3, domain=study_domain((0.0, 1.0, 0.0, 1.0), 1 / 4, True))
    strip = run_reference(build_fine_grid(strip_r, 1 / 4, 16), cfg)
    np.testing.assert_allclose(np.tile(strip.snapshots[0.05], (1, 4)), full.snapshots[0.05], atol=1e-13)
    np.testing.assert_allclose(np.tile(fluid_average(strip, 0.05), (1, 4)), fluid_average(full, 0.05),
                               atol=1e-13)
    assert not invariant_in_x2(TransportConfig(boundary=SLAB, u_I=parse_field("gauss: 1, 0.5, 0.5, 0.2",
                                                                              "initial")),
                               (0.0, 1.0, 0.0, 1.0))
    assert not invariant_in_x2(TransportConfig(), (0.0, 1.0, 0.0, 1.0))


def test_small_convergence_study(tmp_path):
    cfg = TransportConfig(u_b=1.0, u_I=0.0, v_I=0.0, D_l=0.5, dt=0.01, T=0.05, epochs=(0.05,),
                          n_radial=16, boundary=SLAB)
    table, ts, fine = convergence_study(0.3, [1 / 4, 1 / 8], 16, cfg, (32, 8), a11=0.56)
    assert [f.grid.shape for f in fine] == [(64, 16), (128, 16)]
    assert all(e > 0 for e in table.errors(0.05))
    table.write_csv(tmp_path / "conv.csv")
    assert (tmp_path / "conv.csv").read_text().splitlines()[0] == "eps,epoch,l2_error_u"
    assert isinstance(is_decreasing(table, 0.05), bool)
    with pytest.raises(GridMismatch):
        convergence_study(0.3, [1 / 16], 16, cfg, (32, 8), a11=0.56)
