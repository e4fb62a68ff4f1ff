"""Stiffness assembly, band solvers, rank-one updates, eigendecomposition."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.linalg import eigh_tridiagonal

from stacknash.errors import InvariantViolation
from stacknash.operators import (
    TriDiagOperator,
    assemble_stiffness,
    eigen_decompose,
    embed,
    interior,
    solve_rank_one,
    solve_tridiag,
    solve_tridiag_pivot,
    stiffness_inner,
)
from stacknash.scenario import DiffusionLaw, Grid


# ---------------------------------------------------------------------------
# stiffness assembly
# ---------------------------------------------------------------------------


def test_stiffness_frozen_entries():
    # a = sqrt(x), N = 3, h = 1/4: diag_0 = (sqrt(1/8)+sqrt(3/8)) * 16
    g = Grid(3, 2, 1.0)
    A = assemble_stiffness(g, DiffusionLaw(0.5))
    assert A.diag[0] == pytest.approx(15.454813220625091, abs=1e-12)
    assert A.diag[1] == pytest.approx((np.sqrt(0.375) + np.sqrt(0.625)) * 16, abs=1e-12)
    assert A.sup[0] == pytest.approx(-np.sqrt(0.375) * 16, abs=1e-12)
    assert np.array_equal(A.sub, A.sup)


def test_stiffness_constant_coefficient_is_classic_laplacian():
    g = Grid(5, 2, 1.0)
    A = assemble_stiffness(g, DiffusionLaw(0.0))
    assert np.allclose(A.diag, 2.0 / g.h**2)
    assert np.allclose(A.sup, -1.0 / g.h**2)


def test_stiffness_scale_factor():
    g = Grid(5, 2, 1.0)
    A1 = assemble_stiffness(g, DiffusionLaw(0.5))
    A3 = assemble_stiffness(g, DiffusionLaw(0.5), scale=3.0)
    assert np.allclose(A3.to_dense(), 3.0 * A1.to_dense())


def test_summation_by_parts_identity_is_exact():
    # <A u, v>_h == sum_j a_{j+1/2} (du)(dv) / h with zero boundary extension
    g = Grid(40, 2, 1.0)
    law = DiffusionLaw(0.5)
    A = assemble_stiffness(g, law)
    rng = np.random.default_rng(42)
    u = rng.standard_normal(g.n_interior)
    v = rng.standard_normal(g.n_interior)
    lhs = stiffness_inner(A, u, v, g)
    a_half = law.a(g.x_half)
    rhs = float(np.sum(a_half * np.diff(embed(u)) * np.diff(embed(v))) / g.h)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_stiffness_is_positive_definite():
    g = Grid(25, 2, 1.0)
    A = assemble_stiffness(g, DiffusionLaw(0.8))
    rng = np.random.default_rng(3)
    for _ in range(5):
        u = rng.standard_normal(g.n_interior)
        assert stiffness_inner(A, u, u, g) > 0.0


def test_interior_embed_round_trip():
    rng = np.random.default_rng(1)
    u = rng.standard_normal((4, 7))
    assert np.array_equal(interior(embed(u)), u)
    full = embed(u)
    assert np.all(full[..., 0] == 0.0) and np.all(full[..., -1] == 0.0)


# ---------------------------------------------------------------------------
# band solvers
# ---------------------------------------------------------------------------


def test_thomas_matches_dense_solve():
    rng = np.random.default_rng(0)
    n = 25
    sub = rng.standard_normal(n - 1)
    sup = rng.standard_normal(n - 1)
    diag = 4.0 + rng.random(n)
    op = TriDiagOperator(sub, diag, sup)
    b = rng.standard_normal(n)
    x = op.solve(b)
    assert np.max(np.abs(x - np.linalg.solve(op.to_dense(), b))) <= 1e-12


def test_thomas_batched_rhs():
    rng = np.random.default_rng(0)
    n = 25
    sub = rng.standard_normal(n - 1)
    sup = rng.standard_normal(n - 1)
    diag = 4.0 + rng.random(n)
    op = TriDiagOperator(sub, diag, sup)
    B = rng.standard_normal((3, n))
    X = solve_tridiag(sub, diag, sup, B)
    ref = np.linalg.solve(op.to_dense(), B.T).T
    assert np.max(np.abs(X - ref)) <= 1e-12


def test_pivoted_solve_handles_near_singular_shift():
    g = Grid(20, 2, 1.0)
    A = assemble_stiffness(g, DiffusionLaw(0.0))
    lam = 4.0 / g.h**2 * np.sin(np.pi * g.h / 2) ** 2
    shifted = A.plus_identity(-(lam + 1e-9 * lam))
    rng = np.random.default_rng(5)
    b = rng.standard_normal(g.n_interior)
    x = solve_tridiag_pivot(shifted.sub, shifted.diag, shifted.sup, b)
    res = np.linalg.norm(shifted.matvec(x) - b) / np.linalg.norm(x)
    assert res <= 1e-8 * lam


def test_matvec_matches_dense_and_batches():
    rng = np.random.default_rng(9)
    n = 12
    op = TriDiagOperator(rng.standard_normal(n - 1), rng.standard_normal(n),
                         rng.standard_normal(n - 1))
    U = rng.standard_normal((5, n))
    ref = U @ op.to_dense().T
    assert np.max(np.abs(op.matvec(U) - ref)) <= 1e-13


def test_rank_one_solve_matches_dense():
    rng = np.random.default_rng(0)
    n = 25
    op = TriDiagOperator(rng.standard_normal(n - 1), 4.0 + rng.random(n),
                         rng.standard_normal(n - 1))
    u = rng.standard_normal(n)
    z = 0.1 * rng.standard_normal(n)
    b = rng.standard_normal(n)
    x = solve_rank_one(op, u, z, b)
    dense = op.to_dense() + np.outer(u, z)
    assert np.max(np.abs(x - np.linalg.solve(dense, b))) <= 1e-12
    resid = np.linalg.norm(op.matvec(x) + u * float(z @ x) - b)
    assert resid <= 1e-11 * np.linalg.norm(b)


def test_zero_pivot_raises():
    with pytest.raises(InvariantViolation):
        solve_tridiag(np.array([1.0]), np.array([0.0, 1.0]), np.array([1.0]),
                      np.array([1.0, 1.0]))


# ---------------------------------------------------------------------------
# eigendecomposition
# ---------------------------------------------------------------------------


def test_eigen_constant_coefficient_closed_form():
    # a == 1: lam_i = (4/h^2) sin^2(i pi h / 2), eigenvectors sin(i pi x)
    g = Grid(30, 2, 1.0)
    A = assemble_stiffness(g, DiffusionLaw(0.0))
    lam, V = eigen_decompose(A)
    i = np.arange(1, g.n_interior + 1)
    exact = 4.0 / g.h**2 * np.sin(i * np.pi * g.h / 2.0) ** 2
    assert np.max(np.abs(lam - exact) / exact) <= 1e-10
    v1 = np.sin(np.pi * g.x[1:-1])
    v1 /= np.linalg.norm(v1)
    assert min(np.linalg.norm(V[:, 0] - v1), np.linalg.norm(V[:, 0] + v1)) <= 1e-10


@pytest.mark.parametrize("n,gamma", [(30, 0.0), (60, 0.7), (100, 0.5), (7, 0.3)])
def test_eigen_quality_against_library_oracle(n, gamma):
    g = Grid(n, 2, 1.0)
    A = assemble_stiffness(g, DiffusionLaw(gamma))
    lam, V = eigen_decompose(A)
    lam_ref, _ = eigh_tridiagonal(A.diag, A.sup)
    assert np.max(np.abs(lam - lam_ref) / np.abs(lam_ref)) <= 1e-9
    assert np.all(np.diff(lam) > 0)  # simple spectrum, ascending
    orth = np.max(np.abs(V.T @ V - np.eye(n)))
    assert orth <= 1e-10
    worst = max(np.linalg.norm(A.matvec(V[:, j]) - lam[j] * V[:, j]) for j in range(n))
    assert worst <= 1e-8 * lam[-1]


def test_eigen_subset_and_symmetry_guard():
    g = Grid(30, 2, 1.0)
    A = assemble_stiffness(g, DiffusionLaw(0.0))
    lam5, V5 = eigen_decompose(A, n_modes=5)
    lam, _ = eigen_decompose(A)
    assert V5.shape == (30, 5)
    assert np.allclose(lam5, lam[:5], rtol=1e-12)
    lopsided = TriDiagOperator(np.array([1.0, 1.0]), np.array([2.0, 2.0, 2.0]),
                               np.array([1.0, 0.5]))
    with pytest.raises(InvariantViolation):
        eigen_decompose(lopsided)
