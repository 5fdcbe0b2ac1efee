"""Shared numerical kernels: sparse assembly, PCG, Thomas, interpolation, fits."""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import PchipInterpolator

from .errors import DegenerateFit, NoConvergence, ZeroPivot


@dataclass
class SparseSystem:
    """Symmetric sparse system ``A x = b`` assembled from COO triplets."""

    matrix: sp.csr_matrix
    rhs: np.ndarray

    @classmethod
    def from_triplets(cls, rows, cols, vals, rhs, n=None, check_symmetry=False):
        n = len(rhs) if n is None else n
        A = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
        A.sum_duplicates()
        system = cls(A, np.asarray(rhs, dtype=float))
        if check_symmetry:
            asym = abs(A - A.T).max() if A.nnz else 0.0
            scale = abs(A).max() if A.nnz else 1.0
            if asym > 1e-12 * scale:
                raise ValueError(f"assembled matrix is not symmetric (max |A - A^T| = {asym:.3e})")
        return system

    @property
    def n(self):
        return self.rhs.shape[0]


def cg_solve(A, b=None, tol=1e-10, max_iter=None, x0=None, precondition=True):
    """Jacobi-preconditioned conjugate gradients.

    Stops when ``||A x - b|| <= tol * ||b||``.  Returns ``(x, iterations)``.
    Singular (gauge-free) systems are fine as long as ``b`` lies in the range
    of ``A``; the caller fixes the gauge afterwards.
    """
    if isinstance(A, SparseSystem):
        A, b = A.matrix, (A.rhs if b is None else b)
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    max_iter = 10 * n + 10 if max_iter is None else max_iter
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    if precondition:
        d = A.diagonal()
        inv_d = np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 1.0)
    else:
        inv_d = np.ones(n)
    z = inv_d * r
    p = z.copy()
    rz = r @ z
    target = tol * bnorm
    res = np.linalg.norm(r)
    for it in range(1, max_iter + 1):
        if res <= target:
            return x, it - 1
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0.0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r)
        if res <= target:
            # guard against drift between recursive and true residual
            true_res = np.linalg.norm(b - A @ x)
            if true_res <= target:
                return x, it
            r = b - A @ x
            res = true_res
        z = inv_d * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NoConvergence(max_iter, res / bnorm)


def tridiag_solve(lower, diag, upper, rhs):
    """Thomas algorithm; batched over leading axes.

    Arrays have the system index on the last axis.  ``lower[..., 0]`` and
    ``upper[..., -1]`` are ignored.  No pivoting: the system must be
    diagonally dominant.
    """
    a = np.asarray(lower, dtype=float)
    b = np.asarray(diag, dtype=float)
    c = np.asarray(upper, dtype=float)
    d = np.asarray(rhs, dtype=float)
    shape = np.broadcast_shapes(a.shape, b.shape, c.shape, d.shape)
    a, b, c, d = (np.broadcast_to(v, shape) for v in (a, b, c, d))
    n = shape[-1]
    cp = np.empty(shape)
    dp = np.empty(shape)
    piv = b[..., 0]
    if np.any(piv == 0.0):
        raise ZeroPivot("zero pivot in row 0")
    cp[..., 0] = c[..., 0] / piv
    dp[..., 0] = d[..., 0] / piv
    for i in range(1, n):
        piv = b[..., i] - a[..., i] * cp[..., i - 1]
        if np.any(piv == 0.0):
            raise ZeroPivot(f"zero pivot in row {i}")
        cp[..., i] = c[..., i] / piv
        dp[..., i] = (d[..., i] - a[..., i] * dp[..., i - 1]) / piv
    x = np.empty(shape)
    x[..., -1] = dp[..., -1]
    for i in range(n - 2, -1, -1):
        x[..., i] = dp[..., i] - cp[..., i] * x[..., i + 1]
    return x


def fit_order(h_list, err_list):
    """Least-squares slope of ``log(err)`` against ``log(h)``."""
    h = np.asarray(h_list, dtype=float)
    e = np.asarray(err_list, dtype=float)
    if h.shape != e.shape or h.size < 2:
        raise ValueError("h_list and err_list need equal lengths >= 2")
    if np.any(h <= 0) or np.any(e <= 0):
        raise ValueError("fit_order needs positive entries")
    lh = np.log(h)
    if np.ptp(lh) == 0.0:
        raise DegenerateFit("all step sizes are equal")
    slope, _ = np.polyfit(lh, np.log(e), 1)
    return float(slope)


class InterpTable:
    """Monotone piecewise-cubic (Fritsch-Carlson/PCHIP) table in one variable."""

    def __init__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or x.size == 0:
            raise ValueError("abscissae and ordinates must be matching 1-D arrays")
        if np.any(np.diff(x) <= 0):
            raise ValueError("abscissae must be strictly increasing")
        self.x = x
        self.y = y
        self._pchip = None
        if x.size > 1:
            # near-flat secants overflow the weighted harmonic mean; the limit (zero slope) is right
            with np.errstate(over="ignore", divide="ignore"):
                self._pchip = PchipInterpolator(x, y, extrapolate=False)

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if self._pchip is None:
            if np.any(r != self.x[0]):
                raise ValueError(f"single-entry table only defined at r={self.x[0]}")
            return np.full(r.shape, self.y[0])
        if np.any(r < self.x[0]) or np.any(r > self.x[-1]):
            raise ValueError(f"radius outside tabulated range [{self.x[0]}, {self.x[-1]}]")
        out = self._pchip(r)
        # exact at the nodes
        idx = np.searchsorted(self.x, r)
        hit = (idx < self.x.size) & (self.x[np.minimum(idx, self.x.size - 1)] == r)
        return np.where(hit, self.y[np.minimum(idx, self.x.size - 1)], out)
