"""Sparse matrices, direct/iterative solves, SPD detection, Picard driver.

Thin, contract-checked wrappers around scipy's sparse machinery. The
solve path verifies its own residual; SPD detection produces a witness
direction d with d^T A d <= 0 whenever a symmetric matrix is not
positive definite; the Picard driver freezes a nonlinear scheme's
coefficients at the current iterate and re-solves until the relative
increment is small.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg


class LinearAlgebraError(Exception):
    """Raised for singular systems, failed solves, or misuse."""


class PicardDivergenceError(LinearAlgebraError):
    """Picard iteration hit the iteration cap.

    Carries the last iterate and the increment history for inspection.
    """

    def __init__(self, message, last_iterate, increments):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.increments = increments


class SparseMatrix:
    """Immutable square-or-rectangular sparse matrix in CSR form."""

    def __init__(self, csr):
        csr = scipy.sparse.csr_matrix(csr)
        csr.sum_duplicates()
        if not np.all(np.isfinite(csr.data)):
            raise LinearAlgebraError("matrix entries must be finite")
        self.csr = csr

    @classmethod
    def from_coo(cls, shape, rows, cols, vals):
        """Build from coordinate triplets; duplicates are summed."""
        coo = scipy.sparse.coo_matrix(
            (vals, (rows, cols)), shape=shape, dtype=float
        )
        return cls(coo.tocsr())

    @classmethod
    def from_dense(cls, array):
        return cls(scipy.sparse.csr_matrix(np.asarray(array, dtype=float)))

    @property
    def shape(self):
        return self.csr.shape

    @property
    def n(self):
        return self.csr.shape[0]

    @property
    def nnz(self):
        return self.csr.nnz

    def to_dense(self):
        return self.csr.toarray()

    def diagonal(self):
        return self.csr.diagonal()

    def matvec(self, x):
        return self.csr @ np.asarray(x, dtype=float)

    def __matmul__(self, x):
        return self.matvec(x)

    def transpose(self):
        return SparseMatrix(self.csr.T.tocsr())

    def frobenius(self):
        return float(np.sqrt((self.csr.data ** 2).sum()))

    def max_abs(self):
        return float(np.abs(self.csr.data).max()) if self.nnz else 0.0

    def row_entries(self, i):
        """Column indices and values of row i (explicitly stored only)."""
        sl = slice(self.csr.indptr[i], self.csr.indptr[i + 1])
        return self.csr.indices[sl], self.csr.data[sl]

    def is_symmetric(self, rtol=1e-12):
        if self.shape[0] != self.shape[1]:
            return False
        diff = (self.csr - self.csr.T).tocoo()
        if diff.nnz == 0:
            return True
        scale = max(self.max_abs(), 1e-300)
        return float(np.abs(diff.data).max()) <= rtol * scale


class SparseBuilder:
    """Accumulates coordinate triplets; duplicate entries sum."""

    def __init__(self, nrows, ncols=None):
        self.shape = (nrows, nrows if ncols is None else ncols)
        self.rows, self.cols, self.vals = [], [], []

    def add(self, i, j, v):
        self.rows.append(i)
        self.cols.append(j)
        self.vals.append(v)

    def build(self):
        return SparseMatrix.from_coo(
            self.shape, self.rows, self.cols, self.vals
        )


@dataclass
class LinearSystem:
    """A x = b with a label per row describing the unknown it balances.

    Labels are tuples like ("cell", k), ("edge", e), ("vertex", v); None
    means unlabeled.
    """

    matrix: SparseMatrix
    rhs: np.ndarray
    dof_labels: tuple = None

    def __post_init__(self):
        self.rhs = np.asarray(self.rhs, dtype=float)
        n, m = self.matrix.shape
        if n != m:
            raise LinearAlgebraError("system matrix must be square")
        if self.rhs.shape != (n,):
            raise LinearAlgebraError("rhs length does not match matrix")
        if self.dof_labels is not None and len(self.dof_labels) != n:
            raise LinearAlgebraError("dof label count does not match matrix")


def _residual_ok(A, x, b):
    r = A.matvec(x) - b
    bound = 1e-10 * (np.linalg.norm(b) + A.frobenius() * np.linalg.norm(x))
    return np.linalg.norm(r) <= max(bound, 1e-300), np.linalg.norm(r), bound


def _solve_lu(A, b):
    try:
        lu = scipy.sparse.linalg.splu(A.csr.tocsc())
    except RuntimeError as err:
        raise LinearAlgebraError(f"singular matrix: {err}") from err
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise LinearAlgebraError("singular matrix: non-finite solution")
    return x


def solve(system, method="auto"):
    """Solve a linear system; the residual is checked, not hoped for.

    method "direct" uses sparse LU; "auto" first tries a Cholesky
    factorization when the matrix is symmetric (dense attempt below a
    size cutoff) and falls back to LU; "cg" runs conjugate gradients with
    a 10 n iteration cap and requires symmetry.
    """
    A, b = system.matrix, system.rhs
    n = A.n
    if method not in ("auto", "direct", "cg"):
        raise LinearAlgebraError(f"unknown solve method: {method!r}")
    if method == "cg":
        if not A.is_symmetric():
            raise LinearAlgebraError("cg requires a symmetric matrix")
        x, info = _cg_compat(A.csr, b, maxiter=10 * n)
        if info != 0:
            raise LinearAlgebraError(
                f"cg did not converge within {10 * n} iterations"
            )
    elif method == "direct":
        x = _solve_lu(A, b)
    else:
        x = None
        if A.is_symmetric() and n <= 2000:
            try:
                c, low = scipy.linalg.cho_factor(A.to_dense())
                x = scipy.linalg.cho_solve((c, low), b)
            except scipy.linalg.LinAlgError:
                x = None
        if x is None:
            x = _solve_lu(A, b)
    ok, rnorm, bound = _residual_ok(A, x, b)
    if not ok:
        raise LinearAlgebraError(
            f"solve residual {rnorm:.3e} exceeds bound {bound:.3e} "
            "(near-singular system?)"
        )
    return x


def _cg_compat(csr, b, maxiter):
    try:
        return scipy.sparse.linalg.cg(
            csr, b, rtol=1e-12, atol=0.0, maxiter=maxiter
        )
    except TypeError:  # older scipy spells the tolerance differently
        return scipy.sparse.linalg.cg(
            csr, b, tol=1e-12, atol=0.0, maxiter=maxiter
        )


@dataclass
class SpdResult:
    """Outcome of SPD detection.

    kind is "spd", "indefinite", or "nonsymmetric"; witness (for
    indefinite matrices) satisfies witness^T A witness <= 0.
    """

    kind: str
    witness: np.ndarray = None
    min_pivot: float = None

    def __bool__(self):
        return self.kind == "spd"


def is_spd(matrix, dense_cutoff=4000):
    """Classify a matrix as SPD / indefinite (with witness) / nonsymmetric.

    SPD means an LDL^T factorization has every pivot above
    1e-14 * max diagonal. Dense factorization below the cutoff; above it
    the smallest eigenvalue is estimated with shift-invert Lanczos.
    """
    if not matrix.is_symmetric():
        return SpdResult(kind="nonsymmetric")
    n = matrix.n
    dmax = float(matrix.diagonal().max(initial=0.0))
    threshold = 1e-14 * max(dmax, 1e-300)
    if n <= dense_cutoff:
        dense = matrix.to_dense()
        dense = 0.5 * (dense + dense.T)
        lu, d, perm = scipy.linalg.ldl(dense)
        # scan D for a non-positive 1x1 pivot or an indefinite 2x2 block
        i = 0
        bad_dir = None
        min_pivot = np.inf
        while i < n:
            if i + 1 < n and abs(d[i + 1, i]) > 0:
                block = d[i:i + 2, i:i + 2]
                w, v = np.linalg.eigh(block)
                min_pivot = min(min_pivot, w.min())
                if w.min() <= threshold:
                    bad_dir = np.zeros(n)
                    bad_dir[i:i + 2] = v[:, 0]
                    break
                i += 2
            else:
                min_pivot = min(min_pivot, d[i, i])
                if d[i, i] <= threshold:
                    bad_dir = np.zeros(n)
                    bad_dir[i] = 1.0
                    break
                i += 1
        if bad_dir is None:
            return SpdResult(kind="spd", min_pivot=float(min_pivot))
        # map the bad direction through L^T: w solves L^T w = e, so
        # w^T A w equals the offending pivot (or block eigenvalue).
        # scipy's ldl returns L with permuted rows; lu[perm] is the
        # actual unit lower triangle, so solve with it and unpermute.
        m_tri = lu[perm]
        v = scipy.linalg.solve_triangular(
            m_tri.T, bad_dir, lower=False, unit_diagonal=True,
            check_finite=False,
        )
        w = np.empty(n)
        w[perm] = v
        quad = float(w @ (dense @ w))
        if quad > threshold:  # numerical borderline; fall back
            w = bad_dir
        return SpdResult(kind="indefinite", witness=w,
                         min_pivot=float(min(min_pivot, 0.0)))
    # large path: Gershgorin certificate first, then the smallest
    # algebraic eigenvalue via shift-invert anchored below the spectrum
    row_abs = np.abs(matrix.csr).sum(axis=1).A1
    gersh = float((2.0 * matrix.diagonal() - row_abs).min())
    if gersh > threshold:
        return SpdResult(kind="spd", min_pivot=gersh)
    sigma = gersh - 1e-3 * max(dmax, 1.0) - 1.0
    try:
        vals, vecs = scipy.sparse.linalg.eigsh(
            matrix.csr, k=1, sigma=sigma, which="LM"
        )
    except RuntimeError:
        vals, vecs = scipy.sparse.linalg.eigsh(
            matrix.csr, k=1, which="SA", maxiter=50 * n
        )
    lam = float(vals[0])
    if lam > threshold:
        return SpdResult(kind="spd", min_pivot=lam)
    return SpdResult(kind="indefinite", witness=vecs[:, 0], min_pivot=lam)


@dataclass
class PicardResult:
    """Converged Picard iteration: solution, solve count, increments."""

    solution: np.ndarray
    iterations: int
    increments: list = field(default_factory=list)
    converged: bool = True


def picard_solve(freeze, u0, tol=1e-8, maxit=200, omega=1.0,
                 callback=None):
    """Fixed-point iteration on systems frozen at the current iterate.

    freeze(u) returns the LinearSystem whose solution is the next
    iterate; omega in (0, 1] under-relaxes the update. Convergence when
    the relative increment ||u_new - u|| <= tol (||u_new|| + 1e-30), or
    immediately when the current iterate already solves its own frozen
    system (a linear scheme therefore converges in one iteration).
    callback(iteration, u, system) runs after each solve, before the
    update (diagnostics hooks).
    """
    if tol <= 0:
        raise LinearAlgebraError("tol must be positive")
    if not 0.0 < omega <= 1.0:
        raise LinearAlgebraError("omega must lie in (0, 1]")
    u = np.asarray(u0, dtype=float).copy()
    increments = []
    for it in range(1, maxit + 1):
        system = freeze(u)
        if it > 1:
            # self-consistency shortcut: u already solves its own frozen
            # system to well below the requested tolerance
            r = np.linalg.norm(system.matrix.matvec(u) - system.rhs)
            scale = (np.linalg.norm(system.rhs)
                     + system.matrix.frobenius() * np.linalg.norm(u))
            if r <= 1e-3 * tol * max(scale, 1e-300):
                return PicardResult(solution=u, iterations=it - 1,
                                    increments=increments)
        x = solve(system, method="auto")
        if callback is not None:
            callback(it, x, system)
        u_new = omega * x + (1.0 - omega) * u
        inc = float(np.linalg.norm(u_new - u))
        increments.append(inc)
        u = u_new
        if inc <= tol * (np.linalg.norm(u_new) + 1e-30):
            return PicardResult(solution=u, iterations=it,
                                increments=increments)
    raise PicardDivergenceError(
        f"Picard iteration did not converge within {maxit} iterations "
        f"(last increment {increments[-1]:.3e})",
        last_iterate=u,
        increments=increments,
    )


def write_matrix_market(matrix, path):
    """Dump a matrix in MatrixMarket coordinate format."""
    scipy.io.mmwrite(str(path), matrix.csr)
