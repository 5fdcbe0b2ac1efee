import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duplex.cell import (CELL_TOL, build_cell_mesh, cell_coefficients, chord_overlap, disk_rect_area,
                         effective_coefficients, read_coefficients_csv, solve_diffusion_cell,
                         solve_flow_cell, tabulate_coefficients)
from duplex.errors import ResolutionTooCoarse, ValidationError

from oracles import A11_QUARTER_EXTRAPOLATED, rayleigh_square_array


@settings(max_examples=60, deadline=None)
@given(x0=st.floats(-0.5, 0.5), w=st.floats(0.0, 0.5), y0=st.floats(-0.5, 0.5), hgt=st.floats(0.0, 0.5),
       r=st.floats(0.0, 0.49))
def test_disk_rect_area_is_additive(x0, w, y0, hgt, r):
    xm = x0 + 0.5 * w
    whole = disk_rect_area(x0, x0 + w, y0, y0 + hgt, r)
    parts = disk_rect_area(x0, xm, y0, y0 + hgt, r) + disk_rect_area(xm, x0 + w, y0, y0 + hgt, r)
    assert whole == pytest.approx(parts, abs=1e-14)
    assert -1e-15 <= whole <= w * hgt + 1e-15


@given(r=st.floats(0.0, 0.49))
def test_disk_rect_area_full_disk_and_chords(r):
    assert disk_rect_area(-0.5, 0.5, -0.5, 0.5, r) == pytest.approx(math.pi * r * r, abs=1e-15)
    assert chord_overlap(0.0, -0.5, 0.5, r) == pytest.approx(2 * r)


def test_mesh_volume_is_exact_and_connected():
    mesh = build_cell_mesh(0.3, 32)
    assert mesh.fluid_volume == pytest.approx(1 - math.pi * 0.09, rel=1e-14)
    assert mesh.connected()


def test_resolution_checks():
    with pytest.raises(ResolutionTooCoarse):
        build_cell_mesh(0.01, 9)    # whole circle inside the centre cell
    with pytest.raises(ValidationError):
        build_cell_mesh(0.3, 4)
    with pytest.raises(ValidationError):
        build_cell_mesh(0.5, 32)


def test_no_obstacle_gives_identity():
    c = cell_coefficients(0.0, 64)
    np.testing.assert_allclose(c.A, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(c.K, np.eye(2), atol=1e-12)


def test_quarter_radius_against_multipole_series():
    c = cell_coefficients(0.25, 128)
    assert c.A[0, 0] == pytest.approx(A11_QUARTER_EXTRAPOLATED, abs=5e-5)
    assert A11_QUARTER_EXTRAPOLATED == pytest.approx(rayleigh_square_array(0.25), abs=1e-6)


@pytest.mark.parametrize("r", [0.1, 0.25, 0.4])
def test_tensor_structure_and_energy(r):
    c = cell_coefficients(r, 64)
    assert abs(c.A[0, 1] - c.A[1, 0]) <= 1e-8
    assert abs(c.A[0, 0] - c.A[1, 1]) <= 5e-4 and abs(c.A[0, 1]) <= 5e-4
    assert 0 < c.A[0, 0] <= c.theta + 1e-6
    np.testing.assert_allclose(c.energy, np.diag(c.A), atol=1e-6)
    assert np.max(np.abs(c.K - c.A)) <= 1e-6
    assert c.residual <= CELL_TOL


def test_two_interface_routes_agree():
    mesh = build_cell_mesh(0.33, 48)
    d, f = solve_diffusion_cell(mesh), solve_flow_cell(mesh)
    for j in range(2):
        np.testing.assert_allclose(d.v[j], f.pi[j], atol=1e-8)
    coeff = effective_coefficients(mesh, d, f)
    assert np.max(np.abs(coeff.K - coeff.A)) <= 1e-9
    assert np.isnan(effective_coefficients(mesh, d).K).all()


def test_coefficients_rise_towards_reference_with_resolution():
    a = [cell_coefficients(0.25, N).A[0, 0] for N in (32, 64, 128)]
    gaps = np.abs(np.array(a) - A11_QUARTER_EXTRAPOLATED)
    assert np.all(np.diff(gaps) < 0)


def test_tables_roundtrip(tmp_path):
    grid = np.linspace(0.0, 0.4, 5)
    tables = tabulate_coefficients(grid, 32)
    a = [c.A[0, 0] for c in tables.rows]
    assert np.all(np.diff(a) < 0)
    assert all(c.theta == 1.0 - math.pi * c.r * c.r for c in tables.rows)
    assert tables.a11(0.2) == a[2]
    assert a[2] > tables.a11(0.25) > a[3]
    tables.write_csv(tmp_path / "c.csv")
    back = read_coefficients_csv(tmp_path / "c.csv")
    assert [c.A[0, 0] for c in back.rows] == a
    np.testing.assert_array_equal(back.r, grid)


def test_tables_are_thread_count_independent():
    grid = [0.1, 0.2, 0.3]
    one = tabulate_coefficients(grid, 32, threads=1)
    many = tabulate_coefficients(grid, 32, threads=3)
    for a, b in zip(one.rows, many.rows):
        assert np.array_equal(a.A, b.A) and np.array_equal(a.K, b.K)


def test_tables_require_increasing_grid():
    with pytest.raises(ValidationError):
        tabulate_coefficients([0.2, 0.1], 32)
