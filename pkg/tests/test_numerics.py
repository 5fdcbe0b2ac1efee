import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import solve_banded

from duplex.errors import DegenerateFit, NoConvergence, ZeroPivot
from duplex.numerics import InterpTable, SparseSystem, cg_solve, fit_order, tridiag_solve


def laplacian_1d(n, shift=0.0):
    main = np.full(n, 2.0 + shift)
    off = -np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 60), seed=st.integers(0, 2 ** 31 - 1))
def test_cg_matches_direct_solve(n, seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n))
    A = sp.csr_matrix(M @ M.T + n * np.eye(n))
    b = rng.standard_normal(n)
    x, iters = cg_solve(A, b, tol=1e-12)
    np.testing.assert_allclose(x, np.linalg.solve(A.toarray(), b), rtol=1e-8, atol=1e-10)
    assert np.linalg.norm(A @ x - b) <= 1e-12 * np.linalg.norm(b) * 1.0001
    assert iters <= 10 * n + 10


def test_cg_zero_rhs_returns_zero():
    x, iters = cg_solve(laplacian_1d(5), np.zeros(5))
    assert iters == 0 and not np.any(x)


def test_cg_accepts_sparse_system_and_singular_gauge():
    # periodic Laplacian is singular; a mean-zero rhs is in its range
    n = 16
    A = laplacian_1d(n).tolil()
    A[0, n - 1] = A[n - 1, 0] = -1.0
    b = np.sin(2 * np.pi * np.arange(n) / n)
    system = SparseSystem(A.tocsr(), b)
    x, _ = cg_solve(system, tol=1e-12)
    assert np.linalg.norm(system.matrix @ x - b) <= 1e-11
    assert system.n == n


def test_cg_reports_no_convergence():
    with pytest.raises(NoConvergence) as info:
        cg_solve(laplacian_1d(50), np.ones(50), tol=1e-14, max_iter=2)
    assert info.value.max_iter == 2 and info.value.residual > 1e-14


def test_sparse_system_symmetry_check():
    with pytest.raises(ValueError, match="not symmetric"):
        SparseSystem.from_triplets([0, 0, 1], [0, 1, 1], [2.0, 1.0, 2.0], np.zeros(2), check_symmetry=True)
    s = SparseSystem.from_triplets([0, 0, 1, 1, 0], [0, 1, 0, 1, 0], [1.0, -1.0, -1.0, 2.0, 1.0],
                                   np.zeros(2), check_symmetry=True)
    assert s.matrix[0, 0] == 2.0  # duplicates summed


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 40), batch=st.integers(1, 4), seed=st.integers(0, 2 ** 31 - 1))
def test_thomas_matches_banded_solver(n, batch, seed):
    rng = np.random.default_rng(seed)
    lower = rng.uniform(-1, 0, (batch, n))
    upper = rng.uniform(-1, 0, (batch, n))
    diag = 2.5 + rng.uniform(0, 1, (batch, n))
    rhs = rng.standard_normal((batch, n))
    x = tridiag_solve(lower, diag, upper, rhs)
    for k in range(batch):
        ab = np.zeros((3, n))
        ab[0, 1:] = upper[k, :-1]
        ab[1] = diag[k]
        ab[2, :-1] = lower[k, 1:]
        np.testing.assert_allclose(x[k], solve_banded((1, 1), ab, rhs[k]), rtol=1e-12, atol=1e-12)


def test_thomas_zero_pivot():
    with pytest.raises(ZeroPivot):
        tridiag_solve([0.0, 1.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0])


@given(order=st.floats(0.5, 4.0), c=st.floats(0.1, 10.0))
def test_fit_order_recovers_power_law(order, c):
    h = np.array([1 / 8, 1 / 16, 1 / 32, 1 / 64])
    assert fit_order(h, c * h ** order) == pytest.approx(order, abs=1e-9)


def test_fit_order_degenerate():
    with pytest.raises(DegenerateFit):
        fit_order([0.1, 0.1], [1.0, 2.0])
    with pytest.raises(ValueError):
        fit_order([0.1], [1.0])


@settings(max_examples=40, deadline=None)
@given(y=st.lists(st.floats(-5, 5), min_size=2, max_size=12, unique=True))
def test_interp_monotone_data_stay_monotone(y):
    y = np.sort(np.array(y))[::-1]
    x = np.linspace(0.0, 0.45, y.size)
    table = InterpTable(x, y)
    assert np.array_equal(table(x), y)
    fine = table(np.linspace(0.0, 0.45, 400))
    assert np.all(np.diff(fine) <= 1e-12)


def test_interp_range_and_single_entry():
    table = InterpTable([0.0, 0.1, 0.2], [1.0, 0.9, 0.7])
    with pytest.raises(ValueError, match="outside"):
        table(0.25)
    single = InterpTable([0.3], [0.55])
    assert single(0.3) == 0.55
    with pytest.raises(ValueError):
        single(0.2)
    with pytest.raises(ValueError):
        InterpTable([0.0, 0.0], [1.0, 1.0])
