"""Discrete spatial operators on the uniform grid.

The diffusion term -(a(x) u_x)_x with homogeneous Dirichlet data becomes the
symmetric positive definite tridiagonal matrix A acting on interior values:

    (A u)_j = ( -a_{j-1/2} u_{j-1} + (a_{j-1/2}+a_{j+1/2}) u_j
                - a_{j+1/2} u_{j+1} ) / h^2,

with a evaluated at interval midpoints, so the degenerate endpoint x = 0 is
never sampled.  Summation by parts is exact:

    <A u, v>_h = sum_j a_{j+1/2} (u_{j+1}-u_j)(v_{j+1}-v_j) / h,

for u, v vanishing on the boundary, which is what makes discrete duality
identities across the package hold to machine precision.

Linear algebra kernels are written out directly: the Thomas elimination for
tridiagonal systems (the implicit Euler steps are strictly diagonally
dominant), a partial-pivoting variant for the nearly singular shifts of
inverse iteration, a Sherman-Morrison wrapper for the rank-one terms the
nonlocal coefficient introduces, and a symmetric tridiagonal eigensolver
built from Sturm-sequence bisection plus inverse iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvariantViolation
from .scenario import DiffusionLaw, Grid


def interior(u: np.ndarray) -> np.ndarray:
    """Interior slice of a nodal array (any leading shape)."""
    return u[..., 1:-1]


def embed(u_int: np.ndarray) -> np.ndarray:
    """Pad an interior array with zero Dirichlet columns."""
    u_int = np.asarray(u_int, dtype=float)
    shape = u_int.shape[:-1] + (u_int.shape[-1] + 2,)
    out = np.zeros(shape)
    out[..., 1:-1] = u_int
    return out


# ---------------------------------------------------------------------------
# tridiagonal operator
# ---------------------------------------------------------------------------


@dataclass
class TriDiagOperator:
    """Tridiagonal matrix stored as bands (sub, diag, sup), size n x n."""

    sub: np.ndarray
    diag: np.ndarray
    sup: np.ndarray

    def __post_init__(self):
        self.sub = np.asarray(self.sub, dtype=float)
        self.diag = np.asarray(self.diag, dtype=float)
        self.sup = np.asarray(self.sup, dtype=float)
        n = self.diag.size
        if self.sub.size != n - 1 or self.sup.size != n - 1:
            raise InvariantViolation("band lengths inconsistent with diagonal")

    @property
    def n(self) -> int:
        return self.diag.size

    def matvec(self, u: np.ndarray) -> np.ndarray:
        """A @ u over the last axis; u may carry leading batch axes."""
        u = np.asarray(u, dtype=float)
        out = self.diag * u
        out[..., 1:] += self.sub * u[..., :-1]
        out[..., :-1] += self.sup * u[..., 1:]
        return out

    def plus_identity(self, sigma: float) -> "TriDiagOperator":
        return TriDiagOperator(self.sub, self.diag + sigma, self.sup)

    def scaled(self, c: float) -> "TriDiagOperator":
        return TriDiagOperator(c * self.sub, c * self.diag, c * self.sup)

    def to_dense(self) -> np.ndarray:
        m = np.diag(self.diag)
        m += np.diag(self.sub, -1)
        m += np.diag(self.sup, 1)
        return m

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return solve_tridiag(self.sub, self.diag, self.sup, rhs)


def assemble_stiffness(grid: Grid, law: DiffusionLaw, scale: float = 1.0) -> TriDiagOperator:
    """Interior stiffness for -(a u_x)_x, midpoint-sampled coefficient."""
    a_half = law.a(grid.x_half)  # a_{j+1/2}, j = 0..N
    inv_h2 = scale / grid.h**2
    diag = (a_half[:-1] + a_half[1:]) * inv_h2
    off = -a_half[1:-1] * inv_h2
    return TriDiagOperator(off.copy(), diag, off.copy())


def stiffness_inner(op: TriDiagOperator, u_int: np.ndarray, v_int: np.ndarray,
                    grid: Grid) -> float:
    """<A u, v>_h = h * sum_j (A u)_j v_j over interior nodes."""
    return float(grid.h * np.sum(op.matvec(u_int) * v_int, axis=-1))


# ---------------------------------------------------------------------------
# direct solvers
# ---------------------------------------------------------------------------


def solve_tridiag(sub: np.ndarray, diag: np.ndarray, sup: np.ndarray,
                  rhs: np.ndarray) -> np.ndarray:
    """Thomas elimination; rhs may be (n,) or batched (..., n).

    No pivoting: intended for the strictly diagonally dominant systems of the
    implicit time steps.  Zero pivots raise instead of propagating NaN.
    """
    rhs = np.asarray(rhs, dtype=float)
    n = diag.size
    cp = np.empty(n - 1)
    inv_m = np.empty(n)
    m = diag[0]
    if m == 0.0:
        raise InvariantViolation("zero pivot in tridiagonal elimination")
    inv_m[0] = 1.0 / m
    for i in range(1, n):
        cp[i - 1] = sup[i - 1] * inv_m[i - 1]
        m = diag[i] - sub[i - 1] * cp[i - 1]
        if m == 0.0:
            raise InvariantViolation("zero pivot in tridiagonal elimination")
        inv_m[i] = 1.0 / m

    d = np.empty_like(rhs)
    d[..., 0] = rhs[..., 0] * inv_m[0]
    for i in range(1, n):
        d[..., i] = (rhs[..., i] - sub[i - 1] * d[..., i - 1]) * inv_m[i]
    x = np.empty_like(rhs)
    x[..., n - 1] = d[..., n - 1]
    for i in range(n - 2, -1, -1):
        x[..., i] = d[..., i] - cp[i] * x[..., i + 1]
    return x


def solve_tridiag_pivot(sub: np.ndarray, diag: np.ndarray, sup: np.ndarray,
                        rhs: np.ndarray) -> np.ndarray:
    """Tridiagonal solve with partial pivoting (fill-in on a second band).

    Used by inverse iteration, where the shifted matrix is deliberately close
    to singular and plain Thomas elimination loses accuracy.
    """
    n = diag.size
    d = diag.astype(float).copy()
    c = np.zeros(n)
    c[: n - 1] = sup
    e = np.zeros(n)  # second superdiagonal fill-in
    b = np.asarray(rhs, dtype=float).copy()
    a = np.zeros(n)
    a[1:] = sub

    for k in range(n - 1):
        if abs(a[k + 1]) > abs(d[k]):
            d[k], a[k + 1] = a[k + 1], d[k]
            c[k], d[k + 1] = d[k + 1], c[k]
            e[k], c[k + 1] = c[k + 1], e[k]
            b[k], b[k + 1] = b[k + 1], b[k]
        if d[k] == 0.0:
            raise InvariantViolation("singular matrix in pivoted elimination")
        m = a[k + 1] / d[k]
        d[k + 1] -= m * c[k]
        c[k + 1] -= m * e[k]
        b[k + 1] -= m * b[k]

    x = np.zeros(n)
    if d[n - 1] == 0.0:
        raise InvariantViolation("singular matrix in pivoted elimination")
    x[n - 1] = b[n - 1] / d[n - 1]
    if n >= 2:
        x[n - 2] = (b[n - 2] - c[n - 2] * x[n - 1]) / d[n - 2]
    for k in range(n - 3, -1, -1):
        x[k] = (b[k] - c[k] * x[k + 1] - e[k] * x[k + 2]) / d[k]
    return x


def solve_rank_one(op: TriDiagOperator, u_vec: np.ndarray, z_vec: np.ndarray,
                   rhs: np.ndarray) -> np.ndarray:
    """Solve (C + u z^T) x = rhs by Sherman-Morrison with two band solves.

    The nonlocal coefficient perturbs each implicit step by exactly one such
    rank-one term (u from the frozen state gradient, z from the quadrature
    row, or transposed roles in the adjoint march).
    """
    ci_r = op.solve(rhs)
    ci_u = op.solve(u_vec)
    denom = 1.0 + float(np.dot(z_vec, ci_u))
    scale = max(1.0, float(np.abs(np.dot(z_vec, ci_u))))
    if abs(denom) <= 1e-14 * scale:
        raise InvariantViolation("rank-one update makes the step matrix singular")
    coef = float(np.dot(z_vec, ci_r)) / denom
    return ci_r - coef * ci_u


# ---------------------------------------------------------------------------
# symmetric tridiagonal eigensolver
# ---------------------------------------------------------------------------


def _sturm_counts(d: np.ndarray, e: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Number of eigenvalues below each shift, via the LDL^T pivot signs.

    Zero pivots are replaced by -pivmin before their sign is read, so a shift
    that exactly hits a leading-submatrix eigenvalue is attributed below it;
    any consistent convention keeps the bisection transitions correct.
    """
    shifts = np.atleast_1d(np.asarray(shifts, dtype=float))
    n = d.size
    e2 = e * e
    pivmin = np.finfo(float).tiny * max(1.0, float(np.max(e2)) if e2.size else 1.0)
    q = d[0] - shifts
    q = np.where(np.abs(q) < pivmin, -pivmin, q)
    count = (q < 0.0).astype(np.int64)
    for i in range(1, n):
        q = d[i] - shifts - e2[i - 1] / q
        q = np.where(np.abs(q) < pivmin, -pivmin, q)
        count += q < 0.0
    return count


def eigen_decompose(op: TriDiagOperator, n_modes: int | None = None,
                    tol: float = 1e-13) -> tuple[np.ndarray, np.ndarray]:
    """Lowest eigenpairs of a symmetric tridiagonal operator.

    Eigenvalues by Sturm-sequence bisection to relative tolerance tol, then
    eigenvectors by inverse iteration with the pivoted band solve; members of
    an eigenvalue cluster are re-orthogonalized by modified Gram-Schmidt.
    Returns (lam ascending, V with Euclidean-orthonormal columns).
    """
    if not np.allclose(op.sub, op.sup, rtol=0.0, atol=0.0):
        raise InvariantViolation("eigensolver requires a symmetric operator")
    d, e = op.diag, op.sup
    n = op.n
    k = n if n_modes is None else min(n_modes, n)

    # Gershgorin bracket
    radius = np.zeros(n)
    radius[:-1] += np.abs(e)
    radius[1:] += np.abs(e)
    lo = float(np.min(d - radius))
    hi = float(np.max(d + radius))
    span = max(hi - lo, 1e-30)
    lo -= 1e-12 * span
    hi += 1e-12 * span

    # bisection per eigenvalue index, vectorized across indices
    los = np.full(k, lo)
    his = np.full(k, hi)
    target = np.arange(1, k + 1)
    for _ in range(200):
        mids = 0.5 * (los + his)
        cnt = _sturm_counts(d, e, mids)
        below = cnt < target  # fewer than i eigenvalues below mid -> go right
        los = np.where(below, mids, los)
        his = np.where(below, his, mids)
        if np.max(his - los) <= tol * max(abs(lo), abs(hi), 1.0):
            break
    lam = 0.5 * (los + his)

    # inverse iteration
    scale = max(abs(lo), abs(hi), 1.0)
    rng = np.random.default_rng(12345)
    vecs = np.empty((n, k))
    for i in range(k):
        shift = lam[i] + 1e-12 * scale  # keep the solve merely near-singular
        v = rng.standard_normal(n)
        v /= np.linalg.norm(v)
        for _ in range(4):
            w = solve_tridiag_pivot(e, d - shift, e, v)
            nw = np.linalg.norm(w)
            if not np.isfinite(nw) or nw == 0.0:
                v = rng.standard_normal(n)
                v /= np.linalg.norm(v)
                continue
            v = w / nw
        vecs[:, i] = v

    # re-orthogonalize clusters of nearby eigenvalues
    gap = tol * scale * 100.0
    start = 0
    for i in range(1, k + 1):
        if i == k or lam[i] - lam[i - 1] > gap:
            if i - start > 1:
                for a in range(start, i):
                    for b in range(start, a):
                        vecs[:, a] -= np.dot(vecs[:, b], vecs[:, a]) * vecs[:, b]
                    nv = np.linalg.norm(vecs[:, a])
                    if nv == 0.0:
                        raise InvariantViolation("degenerate eigenvector cluster")
                    vecs[:, a] /= nv
            start = i

    order = np.argsort(lam)
    return lam[order], vecs[:, order]
