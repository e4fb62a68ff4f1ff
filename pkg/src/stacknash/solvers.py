"""Time marches for the degenerate nonlocal heat equation and its adjoints.

All schemes are backward Euler on the shared grid: step n advances to level
t_n by solving (I/dt + l(g^n) A) u^n = u^{n-1}/dt + f^n, with the source
taken at the new level.  The nonlocal coefficient couples each step to the
state integral g^n = int u^n dx, handled by a scalar Picard iteration per
step; its linearization contributes exactly one rank-one term per step,

    forward (sensitivity):   + l'(g^n) (A ybar^n) (h 1^T) u,
    backward (adjoint):      + l'(g^k) 1 (h A y^k)^T p,

transposes of one another, solved by Sherman-Morrison.  This makes the
discrete adjoint identity

    sum_{n=1..M} dt <Lu^n, v^n> - sum_{n=0..M-1} dt <u^n, L*v^n>
        = <u^M, (I + dt l A) v^M> - <u^0, (I + dt l A) v^0>

hold to machine precision, which downstream optimality and duality checks
rely on.  The coupled optimality system (one state, two adjoints with
feedback controls) is a damped fixed-point iteration over the adjoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceFailure, InvariantViolation
from .operators import (
    TriDiagOperator,
    assemble_stiffness,
    embed,
    interior,
    solve_rank_one,
)
from .scenario import Grid, NonlocalLaw, Scenario


def shifted_operator(A: TriDiagOperator, ell: float, dt: float) -> TriDiagOperator:
    """I/dt + ell * A as a tridiagonal operator."""
    return TriDiagOperator(ell * A.sub, 1.0 / dt + ell * A.diag, ell * A.sup)


def step_implicit(u_n: np.ndarray, op: TriDiagOperator, coeff: float,
                  source_n1: np.ndarray, dt: float) -> np.ndarray:
    """One backward-Euler step on interior values:

    (I/dt + coeff * A) u_{n+1} = u_n/dt + source_{n+1}.
    """
    if coeff <= 0.0:
        raise InvariantViolation("implicit step requires a positive diffusion factor")
    return shifted_operator(op, coeff, dt).solve(u_n / dt + source_n1)


def integral_levels(field_arr: np.ndarray, grid: Grid) -> np.ndarray:
    """Trapezoid integral of every time level of a nodal field."""
    return field_arr @ grid.trapezoid_weights


def l2q_norm(field_arr: np.ndarray, grid: Grid) -> float:
    """L²(Q) norm, rectangle rule over levels 1..M."""
    wx = grid.trapezoid_weights
    return float(np.sqrt(np.sum((field_arr[1:] ** 2) @ wx) * grid.dt))


@dataclass
class SourceSpec:
    """Distributed source plus region-masked control sources."""

    distributed: np.ndarray | None = None
    masked: list | None = None   # (Region, SpaceTimeField-array, coefficient)

    def assemble(self, grid: Grid) -> np.ndarray:
        total = np.zeros((grid.m_steps + 1, grid.n_interior + 2))
        if self.distributed is not None:
            total += self.distributed
        for region, field_arr, coeff in (self.masked or []):
            total += coeff * region.weights(grid) * field_arr
        return total


# ---------------------------------------------------------------------------
# linear marches
# ---------------------------------------------------------------------------


def _ell_per_level(ell_levels, grid: Grid) -> np.ndarray:
    arr = np.asarray(ell_levels, dtype=float)
    if arr.ndim == 0:
        return np.full(grid.m_steps + 1, float(arr))
    if arr.shape != (grid.m_steps + 1,):
        raise InvariantViolation("per-level coefficient has wrong length")
    return arr


def solve_forward_linear(grid: Grid, A: TriDiagOperator, ell_levels,
                         y0: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """March y^n with frozen coefficients; sources[n] acts on the step to t_n."""
    ell = _ell_per_level(ell_levels, grid)
    dt = grid.dt
    y = np.zeros((grid.m_steps + 1, grid.n_interior + 2))
    y[0] = y0
    for n in range(1, grid.m_steps + 1):
        y[n, 1:-1] = step_implicit(y[n - 1, 1:-1], A, ell[n], sources[n, 1:-1], dt)
    return y


def solve_backward(grid: Grid, A: TriDiagOperator, ell_levels,
                   sources: np.ndarray, y_field: np.ndarray | None = None,
                   dell_levels=None, terminal: np.ndarray | None = None) -> np.ndarray:
    """Adjoint march p^k for k = M-1 .. 0 from p^M (default zero).

    sources[k] enters row k.  When dell_levels and y_field are given, each row
    carries the rank-one adjoint coupling 1 <A y^k, p^k>_h l'(g^k).
    """
    ell = _ell_per_level(ell_levels, grid)
    dell = None if dell_levels is None else _ell_per_level(dell_levels, grid)
    dt = grid.dt
    h = grid.h
    p = np.zeros((grid.m_steps + 1, grid.n_interior + 2))
    if terminal is not None:
        p[-1] = terminal
    ones = np.ones(grid.n_interior)
    for k in range(grid.m_steps - 1, -1, -1):
        C = shifted_operator(A, ell[k], dt)
        rhs = p[k + 1, 1:-1] / dt + sources[k, 1:-1]
        if dell is not None and dell[k] != 0.0:
            z = dell[k] * h * A.matvec(y_field[k, 1:-1])
            p[k, 1:-1] = solve_rank_one(C, ones, z, rhs)
        else:
            p[k, 1:-1] = C.solve(rhs)
    return p


# ---------------------------------------------------------------------------
# nonlocal forward march
# ---------------------------------------------------------------------------


@dataclass
class ForwardSolution:
    field: np.ndarray
    g: np.ndarray
    picard_iters: np.ndarray

    @property
    def max_picard(self) -> int:
        return int(np.max(self.picard_iters))


def solve_forward_nonlocal(grid: Grid, A: TriDiagOperator, law: NonlocalLaw,
                           y0: np.ndarray, sources: np.ndarray,
                           tol: float = 1e-11, max_iter: int = 50) -> ForwardSolution:
    """March the quasilinear state; scalar Picard on g^n at every step."""
    dt = grid.dt
    wx = grid.trapezoid_weights
    y = np.zeros((grid.m_steps + 1, grid.n_interior + 2))
    y[0] = y0
    g = np.zeros(grid.m_steps + 1)
    g[0] = float(y0 @ wx)
    iters = np.zeros(grid.m_steps + 1, dtype=int)
    for n in range(1, grid.m_steps + 1):
        rhs = y[n - 1, 1:-1] / dt + sources[n, 1:-1]
        g_old = g[n - 1]
        for it in range(1, max_iter + 1):
            ell = float(law.ell(g_old))
            if ell <= 0.0:
                raise ConvergenceFailure(
                    "diffusion law became nonpositive during Picard iteration",
                    {"level": n, "g": g_old, "ell": ell})
            u = shifted_operator(A, ell, dt).solve(rhs)
            g_new = float(u @ wx[1:-1])
            if abs(g_new - g_old) <= tol * max(1.0, abs(g_new)):
                break
            g_old = g_new
        else:
            raise ConvergenceFailure(
                "per-step Picard iteration did not settle the state integral",
                {"level": n, "last_delta": abs(g_new - g_old)})
        y[n, 1:-1] = u
        g[n] = g_new
        iters[n] = it
    return ForwardSolution(y, g, iters)


# ---------------------------------------------------------------------------
# linearized (sensitivity) marches around a nonlocal trajectory
# ---------------------------------------------------------------------------


def solve_sensitivity_forward(grid: Grid, A: TriDiagOperator, law: NonlocalLaw,
                              base: ForwardSolution,
                              sources: np.ndarray) -> np.ndarray:
    """Exact linearization of the nonlocal march around base, marched forward.

    Step n solves (I/dt + l(g^n) A + l'(g^n) (A y^n) (h 1)^T) w = rhs by
    Sherman-Morrison; no inner iteration is needed because the rank-one
    update is handled exactly.
    """
    dt = grid.dt
    h = grid.h
    ell = law.ell(base.g)
    dell = law.dell(base.g)
    w = np.zeros_like(base.field)
    ones = np.ones(grid.n_interior)
    for n in range(1, grid.m_steps + 1):
        C = shifted_operator(A, float(ell[n]), dt)
        rhs = w[n - 1, 1:-1] / dt + sources[n, 1:-1]
        u_vec = float(dell[n]) * A.matvec(base.field[n, 1:-1])
        w[n, 1:-1] = solve_rank_one(C, u_vec, h * ones, rhs)
    return w


def solve_adjoint_nonlocal(grid: Grid, A: TriDiagOperator, law: NonlocalLaw,
                           base: ForwardSolution, sources: np.ndarray,
                           terminal: np.ndarray | None = None) -> np.ndarray:
    """Backward adjoint march along a nonlocal trajectory (exact transpose)."""
    return solve_backward(grid, A, law.ell(base.g), sources,
                          y_field=base.field, dell_levels=law.dell(base.g),
                          terminal=terminal)


def solve_second_order_pair(grid: Grid, A: TriDiagOperator, law: NonlocalLaw,
                            base: ForwardSolution, p_field: np.ndarray,
                            alpha_i: float, od_weights: np.ndarray,
                            theta_sources: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Second-order pair (theta, eta) for one follower functional.

    theta is the state sensitivity for the given direction sources; eta is
    the exact linearization of the adjoint march, carrying the three extra
    rank-one couplings through l', l'' evaluated on the base trajectory.
    """
    theta = solve_sensitivity_forward(grid, A, law, base, theta_sources)
    h = grid.h
    dt = grid.dt
    ell = law.ell(base.g)
    dell = law.dell(base.g)
    d2ell = law.d2ell(base.g)
    Theta = integral_levels(theta, grid)

    eta = np.zeros_like(theta)
    ones = np.ones(grid.n_interior)
    for k in range(grid.m_steps - 1, -1, -1):
        y_int = base.field[k, 1:-1]
        p_int = p_field[k, 1:-1]
        th_int = theta[k, 1:-1]
        Ay = A.matvec(y_int)
        rhs = (eta[k + 1, 1:-1] / dt
               + alpha_i * od_weights[1:-1] * th_int
               - float(dell[k]) * Theta[k] * A.matvec(p_int)
               - float(d2ell[k]) * Theta[k] * (h * float(Ay @ p_int)) * ones
               - float(dell[k]) * (h * float(A.matvec(th_int) @ p_int)) * ones)
        C = shifted_operator(A, float(ell[k]), dt)
        if dell[k] != 0.0:
            z = float(dell[k]) * h * Ay
            eta[k, 1:-1] = solve_rank_one(C, ones, z, rhs)
        else:
            eta[k, 1:-1] = C.solve(rhs)
    return theta, eta


# ---------------------------------------------------------------------------
# coupled optimality system
# ---------------------------------------------------------------------------


@dataclass
class CoupledSolution:
    """State, the two adjoint states, and fixed-point diagnostics."""

    y: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    g: np.ndarray
    iterations: int
    residual: float
    picard_max: int = 0

    def adjoints(self) -> tuple[np.ndarray, np.ndarray]:
        return self.p1, self.p2

    def controls(self, mu: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
        """Feedback controls -p_i/mu_i (meaningful on levels 1..M)."""
        return -self.p1 / mu[0], -self.p2 / mu[1]


def solve_optimality_system(scen: Scenario, A: TriDiagOperator,
                            h_field: np.ndarray) -> CoupledSolution:
    """Damped fixed-point solve of the state/adjoint/adjoint Nash system.

    Given the leader source, alternate (i) the nonlocal state march with
    feedback controls -p_i/mu_i and (ii) the two adjoint marches, relaxing
    the adjoints with the configured damping factor.
    """
    grid = scen.grid
    law = scen.ell
    w = scen.region_weights()
    yd1, yd2 = scen.target_fields()
    mu1, mu2 = scen.mu
    a1, a2 = scen.alpha
    damp = scen.solver["fixed_point_damping"]
    tol = scen.solver["fixed_point_tol"]
    max_iter = scen.solver["fixed_point_max_iter"]
    p_tol = scen.solver["picard_tol"]
    p_max = scen.solver["picard_max_iter"]

    shape = (grid.m_steps + 1, grid.n_interior + 2)
    p1 = np.zeros(shape)
    p2 = np.zeros(shape)
    leader = h_field * w["O"]
    history = []
    fwd = None
    picard_max = 0
    for it in range(1, max_iter + 1):
        sources = leader - (w["O1"] / mu1) * p1 - (w["O2"] / mu2) * p2
        fwd = solve_forward_nonlocal(grid, A, law, scen.y0, sources,
                                     tol=p_tol, max_iter=p_max)
        picard_max = max(picard_max, fwd.max_picard)
        src1 = a1 * w["Od"] * (fwd.field - yd1)
        src2 = a2 * w["Od"] * (fwd.field - yd2)
        q1 = solve_adjoint_nonlocal(grid, A, law, fwd, src1)
        q2 = solve_adjoint_nonlocal(grid, A, law, fwd, src2)
        with np.errstate(over="ignore"):
            res = max(l2q_norm(q1 - p1, grid), l2q_norm(q2 - p2, grid))
        if not np.isfinite(res):
            raise ConvergenceFailure(
                "optimality-system fixed point diverged",
                {"iteration": it, "residual": float(res)})
        history.append(res)
        scale = 1.0 + max(l2q_norm(q1, grid), l2q_norm(q2, grid))
        if res <= tol * scale:
            p1, p2 = q1, q2
            break
        p1 = (1.0 - damp) * p1 + damp * q1
        p2 = (1.0 - damp) * p2 + damp * q2
    else:
        raise ConvergenceFailure(
            "optimality-system fixed point did not reach tolerance",
            {"residuals": history[-10:], "iterations": max_iter})

    sources = leader - (w["O1"] / mu1) * p1 - (w["O2"] / mu2) * p2
    fwd = solve_forward_nonlocal(grid, A, law, scen.y0, sources,
                                 tol=p_tol, max_iter=p_max)
    return CoupledSolution(fwd.field, p1, p2, fwd.g, it, history[-1],
                           max(picard_max, fwd.max_picard))


# ---------------------------------------------------------------------------
# spectral (eigenbasis) reference solver
# ---------------------------------------------------------------------------


@dataclass
class GalerkinSolution:
    field: np.ndarray
    coeffs: np.ndarray      # (M+1, n_modes)
    eigenvalues: np.ndarray
    g: np.ndarray
    picard_iters: np.ndarray


def solve_galerkin(grid: Grid, A: TriDiagOperator, law: NonlocalLaw,
                   y0: np.ndarray, sources: np.ndarray, n_modes: int,
                   eig=None, tol: float = 1e-11,
                   max_iter: int = 50) -> GalerkinSolution:
    """Backward Euler in the truncated eigenbasis of the stiffness operator.

    Modes are L²_h-orthonormal (Euclidean eigenvectors scaled by 1/sqrt(h)),
    so projection and reconstruction are plain weighted dot products.  Each
    step runs the same scalar Picard iteration on g as the full solver.
    """
    from .operators import eigen_decompose

    if eig is None:
        lam, V = eigen_decompose(A, n_modes=n_modes)
    else:
        lam, V = eig
        lam, V = lam[:n_modes], V[:, :n_modes]
    h = grid.h
    Vh = V / np.sqrt(h)                       # L²_h-orthonormal columns
    mode_integrals = h * np.sum(Vh, axis=0)   # int of each mode over (0,1)

    dt = grid.dt
    m = grid.m_steps
    coeffs = np.zeros((m + 1, n_modes))
    coeffs[0] = h * (Vh.T @ y0[1:-1])
    g = np.zeros(m + 1)
    g[0] = float(coeffs[0] @ mode_integrals)
    iters = np.zeros(m + 1, dtype=int)
    for n in range(1, m + 1):
        f_hat = h * (Vh.T @ sources[n, 1:-1])
        rhs = coeffs[n - 1] / dt + f_hat
        g_old = g[n - 1]
        for it in range(1, max_iter + 1):
            ell = float(law.ell(g_old))
            if ell <= 0.0:
                raise ConvergenceFailure("diffusion law nonpositive in modal solve",
                                         {"level": n, "g": g_old})
            c = rhs / (1.0 / dt + ell * lam)
            g_new = float(c @ mode_integrals)
            if abs(g_new - g_old) <= tol * max(1.0, abs(g_new)):
                break
            g_old = g_new
        else:
            raise ConvergenceFailure("modal Picard iteration stalled", {"level": n})
        coeffs[n] = c
        g[n] = g_new
        iters[n] = it
    y = np.zeros((m + 1, grid.n_interior + 2))
    y[:, 1:-1] = coeffs @ Vh.T
    return GalerkinSolution(y, coeffs, lam, g, iters)


# ---------------------------------------------------------------------------
# radial variant
# ---------------------------------------------------------------------------


@dataclass
class RadialOperator:
    """Diffusion stiffness plus the radial advection correction."""

    op: TriDiagOperator        # A + advection (applied with the same l factor)
    upwind_nodes: np.ndarray   # nodes where the centered stencil was replaced


def assemble_radial(grid: Grid, a_law, dim: int) -> RadialOperator:
    """Interior operator for -(a z_r)_r - (dim-1) a(r)/r z_r.

    Centered advection by default; nodes with cell Peclet (dim-1)h/(2r) > 2
    fall back to the one-sided difference oriented toward larger r (the
    advection velocity points toward the origin).
    """
    A = assemble_stiffness(grid, a_law)
    n = grid.n_interior
    h = grid.h
    r = grid.x[1:-1]
    V = (dim - 1) * a_law.a(r) / r
    pe = (dim - 1) * h / (2.0 * r)
    upwind = pe > 2.0

    sub = A.sub.copy()
    diag = A.diag.copy()
    sup = A.sup.copy()
    for j in range(n):
        if V[j] == 0.0:
            continue
        if upwind[j]:
            diag[j] += V[j] / h
            if j < n - 1:
                sup[j] += -V[j] / h
        else:
            if j > 0:
                sub[j - 1] += V[j] / (2.0 * h)
            if j < n - 1:
                sup[j] += -V[j] / (2.0 * h)
    return RadialOperator(TriDiagOperator(sub, diag, sup), np.where(upwind)[0])


def solve_radial(grid: Grid, a_law, law: NonlocalLaw, dim: int,
                 y0: np.ndarray, sources: np.ndarray,
                 tol: float = 1e-11, max_iter: int = 50
                 ) -> tuple[ForwardSolution, RadialOperator]:
    """Nonlocal march of the radial profile on (0,1) with Dirichlet ends.

    The nonlocal coupling remains the plain interval integral of the profile
    (no r^{dim-1} Jacobian), which downstream reports flag explicitly.
    """
    rad = assemble_radial(grid, a_law, dim)
    sol = solve_forward_nonlocal(grid, rad.op, law, y0, sources,
                                 tol=tol, max_iter=max_iter)
    return sol, rad
