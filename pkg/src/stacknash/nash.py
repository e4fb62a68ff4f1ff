"""Follower game: functionals, Nash quasi-equilibrium, derivative probes.

Cost functionals for follower i with control v^i supported on O_i:

    J_i = (alpha_i/2) ||y - y_{i,d}||^2 over O_d x (0,T)
        + (mu_i/2)    ||v^i||^2        over O_i x (0,T).

Quadrature alignment: the tracking term sums time levels 1..M-1 and the
control term levels 1..M (rectangle rule in t, trapezoid in x).  With the
backward marches of the solvers module this makes the discrete gradient
identity exact: the sensitivity pairing over levels 1..M equals the
tracking pairing over levels 1..M-1 because the sensitivity vanishes at
level 0 and the adjoint at level M.  Consequently the feedback controls
v^i = -p^i/mu_i annul the gradient to machine precision, and the duality
gap certificates below are exact zeros rather than O(h^2 + dt) residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceFailure
from .operators import TriDiagOperator, assemble_stiffness
from .scenario import Grid, Scenario, h1a_seminorm, l2_norm
from .solvers import (
    CoupledSolution,
    ForwardSolution,
    l2q_norm,
    solve_adjoint_nonlocal,
    solve_forward_nonlocal,
    solve_optimality_system,
    solve_second_order_pair,
    solve_sensitivity_forward,
)


def _weighted_pairing(a: np.ndarray, b: np.ndarray, region_w: np.ndarray,
                      grid: Grid, levels: slice) -> float:
    """Space-time pairing dt * Σ_k Σ_j h * w_j * a_kj * b_kj."""
    return float(grid.dt * grid.h * np.sum((a[levels] * b[levels]) * region_w))


TRACK_LEVELS = slice(1, -1)    # levels 1..M-1
CONTROL_LEVELS = slice(1, None)  # levels 1..M


@dataclass
class FunctionalReport:
    """Values and split terms of the two follower functionals."""

    j1: float
    j2: float
    tracking: tuple[float, float]
    cost: tuple[float, float]
    gradient_norms: tuple[float, float]

    def reassemble_defect(self, alpha, mu) -> float:
        d1 = abs(self.j1 - (0.5 * alpha[0] * self.tracking[0]
                            + 0.5 * mu[0] * self.cost[0]))
        d2 = abs(self.j2 - (0.5 * alpha[1] * self.tracking[1]
                            + 0.5 * mu[1] * self.cost[1]))
        return max(d1, d2)


@dataclass
class EquilibriumCertificate:
    """Nash quasi-equilibrium with first- and second-order probe results."""

    v1: np.ndarray
    v2: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    y: np.ndarray
    g: np.ndarray
    j1: float
    j2: float
    duality_gaps: tuple[list, list]
    hessian_rayleigh: tuple[float, float]
    iterations: int
    residual: float

    def base_state(self) -> ForwardSolution:
        return ForwardSolution(self.y, self.g,
                               np.zeros(self.g.shape[0], dtype=int))


def _state_sources(scen: Scenario, h_field: np.ndarray, v1: np.ndarray,
                   v2: np.ndarray) -> np.ndarray:
    w = scen.region_weights()
    return h_field * w["O"] + v1 * w["O1"] + v2 * w["O2"]


def eval_functionals(scen: Scenario, A: TriDiagOperator, h_field: np.ndarray,
                     v1: np.ndarray, v2: np.ndarray,
                     fwd: ForwardSolution | None = None) -> FunctionalReport:
    """Evaluate J_1, J_2 at explicit controls, with gradient field norms."""
    grid = scen.grid
    w = scen.region_weights()
    if fwd is None:
        fwd = solve_forward_nonlocal(
            grid, A, scen.ell, scen.y0, _state_sources(scen, h_field, v1, v2),
            tol=scen.solver["picard_tol"], max_iter=scen.solver["picard_max_iter"])
    yd1, yd2 = scen.target_fields()
    tracking = []
    cost = []
    grad_norms = []
    for i, (v, yd) in enumerate(((v1, yd1), (v2, yd2))):
        diff = fwd.field - yd
        tracking.append(_weighted_pairing(diff, diff, w["Od"], grid, TRACK_LEVELS))
        cost.append(_weighted_pairing(v, v, w[f"O{i+1}"], grid, CONTROL_LEVELS))
        track_src = scen.alpha[i] * w["Od"] * diff
        p = solve_adjoint_nonlocal(grid, A, scen.ell, fwd, track_src)
        gfield = (scen.mu[i] * v + p) * (w[f"O{i+1}"] > 0.0)
        gn = np.sqrt(_weighted_pairing(gfield, gfield, w[f"O{i+1}"], grid,
                                       CONTROL_LEVELS))
        grad_norms.append(float(gn))
    j1 = 0.5 * scen.alpha[0] * tracking[0] + 0.5 * scen.mu[0] * cost[0]
    j2 = 0.5 * scen.alpha[1] * tracking[1] + 0.5 * scen.mu[1] * cost[1]
    return FunctionalReport(float(j1), float(j2),
                            (float(tracking[0]), float(tracking[1])),
                            (float(cost[0]), float(cost[1])),
                            (grad_norms[0], grad_norms[1]))


def directional_gradient(scen: Scenario, A: TriDiagOperator, i: int,
                         v_hat: np.ndarray, h_field: np.ndarray,
                         v1: np.ndarray, v2: np.ndarray,
                         fwd: ForwardSolution | None = None) -> float:
    """Gateaux derivative of J_i in the follower direction v_hat.

    Uses the sensitivity form: alpha_i <(y - y_d), omega>_{O_d, 1..M-1}
    plus mu_i <v^i, v_hat>_{O_i, 1..M}.
    """
    grid = scen.grid
    w = scen.region_weights()
    if fwd is None:
        fwd = solve_forward_nonlocal(
            grid, A, scen.ell, scen.y0, _state_sources(scen, h_field, v1, v2),
            tol=scen.solver["picard_tol"], max_iter=scen.solver["picard_max_iter"])
    wi = w[f"O{i+1}"]
    omega = solve_sensitivity_forward(grid, A, scen.ell, fwd, wi * v_hat)
    yd = scen.target_fields()[i]
    vi = v1 if i == 0 else v2
    track = scen.alpha[i] * _weighted_pairing(fwd.field - yd, omega, w["Od"],
                                              grid, TRACK_LEVELS)
    ctrl = scen.mu[i] * _weighted_pairing(vi, v_hat, wi, grid, CONTROL_LEVELS)
    return float(track + ctrl)


def hessian_quadratic_form(scen: Scenario, A: TriDiagOperator, i: int,
                           v_bar: np.ndarray, base: ForwardSolution,
                           p_i: np.ndarray, mu_i: float | None = None) -> float:
    """Second Gateaux derivative of J_i along v_bar at the given state.

    Equals mu_i ||v_bar||^2 on O_i plus the pairing of v_bar with the
    linearized adjoint eta from the second-order pair.
    """
    grid = scen.grid
    w = scen.region_weights()
    wi = w[f"O{i+1}"]
    mu = scen.mu[i] if mu_i is None else mu_i
    theta, eta = solve_second_order_pair(grid, A, scen.ell, base, p_i,
                                         scen.alpha[i], w["Od"], wi * v_bar)
    quad = mu * _weighted_pairing(v_bar, v_bar, wi, grid, CONTROL_LEVELS)
    cross = _weighted_pairing(eta, v_bar, wi, grid, CONTROL_LEVELS)
    return float(quad + cross)


def _probe_directions(scen: Scenario, count: int) -> list[np.ndarray]:
    """Deterministic unit test directions: one constant plus random fields."""
    grid = scen.grid
    rng = np.random.default_rng(scen.solver["seed"])
    dirs = []
    const = np.zeros((grid.m_steps + 1, grid.n_interior + 2))
    const[:, 1:-1] = 1.0
    dirs.append(const)
    for _ in range(max(0, count - 1)):
        d = np.zeros_like(const)
        d[:, 1:-1] = rng.standard_normal((grid.m_steps + 1, grid.n_interior))
        dirs.append(d)
    for d in dirs:
        d /= l2q_norm(d, grid)
    return dirs


def solve_nash(scen: Scenario, A: TriDiagOperator, h_field: np.ndarray,
               n_dirs: int = 6) -> EquilibriumCertificate:
    """Nash quasi-equilibrium for a fixed leader: feedback controls plus
    first-order (duality-gap) and second-order (Rayleigh) certificates."""
    grid = scen.grid
    w = scen.region_weights()
    sol: CoupledSolution = solve_optimality_system(scen, A, h_field)
    masks = (w["O1"] > 0.0, w["O2"] > 0.0)
    v1 = -sol.p1 / scen.mu[0] * masks[0]
    v2 = -sol.p2 / scen.mu[1] * masks[1]
    rep = eval_functionals(scen, A, h_field, v1, v2)

    base = ForwardSolution(sol.y, sol.g, np.zeros(grid.m_steps + 1, dtype=int))
    dirs = _probe_directions(scen, n_dirs)
    gaps: tuple[list, list] = ([], [])
    rayleigh = [np.inf, np.inf]
    for i, (v, p) in enumerate(((v1, sol.p1), (v2, sol.p2))):
        wi = w[f"O{i+1}"]
        for d in dirs:
            gap = _weighted_pairing(scen.mu[i] * v + p, d, wi, grid,
                                    CONTROL_LEVELS)
            gaps[i].append(abs(float(gap)))
            denom = _weighted_pairing(d, d, wi, grid, CONTROL_LEVELS)
            if denom > 0.0:
                form = hessian_quadratic_form(scen, A, i, d, base, p)
                if not np.isfinite(form):
                    raise ConvergenceFailure(
                        "second-order probe overflowed at the equilibrium",
                        {"follower": i + 1, "form": float(form)})
                rayleigh[i] = min(rayleigh[i], form / denom)
    return EquilibriumCertificate(
        v1, v2, sol.p1, sol.p2, sol.y, sol.g, rep.j1, rep.j2,
        gaps, (float(rayleigh[0]), float(rayleigh[1])),
        sol.iterations, sol.residual)


@dataclass
class ThresholdReport:
    threshold: float
    at_lower_bound: bool
    rayleigh_at_threshold: float
    probes: int


def estimate_convexity_threshold(scen: Scenario, h_field: np.ndarray,
                                 sample_dirs: int = 6, lo: float = 1e-3,
                                 hi: float = 1e6,
                                 rel_tol: float = 0.01) -> ThresholdReport:
    """Smallest penalty mu (applied to both followers) with nonnegative
    sampled Rayleigh quotients, located by bisection in log(mu)."""

    def min_rayleigh(mu: float) -> float:
        trial = scen.with_overrides(mu=[mu, mu])
        A = assemble_stiffness(trial.grid, trial.a_law)
        try:
            cert = solve_nash(trial, A, h_field, n_dirs=sample_dirs)
        except ConvergenceFailure:
            return -np.inf   # unsolvable feedback regime counts as nonconvex
        return min(cert.hessian_rayleigh)

    probes = 1
    r_lo = min_rayleigh(lo)
    if r_lo >= 0.0:
        return ThresholdReport(lo, True, float(r_lo), probes)
    r_hi = min_rayleigh(hi)
    probes += 1
    if r_hi < 0.0:
        raise ConvergenceFailure(
            "no convex penalty level found below the search ceiling",
            {"mu_ceiling": hi, "rayleigh": r_hi})
    a, b = lo, hi
    r_b = r_hi
    while b / a > 1.0 + rel_tol:
        mid = float(np.sqrt(a * b))
        r_mid = min_rayleigh(mid)
        probes += 1
        if r_mid >= 0.0:
            b, r_b = mid, r_mid
        else:
            a = mid
    return ThresholdReport(float(b), False, float(r_b), probes)


def energy_margin_report(scen: Scenario, A: TriDiagOperator,
                         cert: EquilibriumCertificate,
                         h_field: np.ndarray) -> dict:
    """Discrete energy of the coupled system against its data bound.

    LHS: sup_n (||y||^2 + Σ_i ||p^i||^2) plus the cumulative weighted
    H^1_a dissipation with the nonlocal factor l(g^n).  Data bound:
    exp(2T)(1+T) (||y0||^2 + ||h 1_O||^2_Q + Σ_i alpha_i^2 ||y_{i,d} 1_Od||^2_Q).
    """
    grid = scen.grid
    w = scen.region_weights()
    m = grid.m_steps
    sup_part = max(
        l2_norm(cert.y[n], grid) ** 2
        + l2_norm(cert.p1[n], grid) ** 2
        + l2_norm(cert.p2[n], grid) ** 2
        for n in range(m + 1))
    ell_vals = scen.ell.ell(cert.g)
    diss = sum(
        grid.dt * float(ell_vals[n]) * (
            h1a_seminorm(cert.y[n], grid, scen.a_law) ** 2
            + h1a_seminorm(cert.p1[n], grid, scen.a_law) ** 2
            + h1a_seminorm(cert.p2[n], grid, scen.a_law) ** 2)
        for n in range(1, m + 1))
    lhs = sup_part + diss

    yd1, yd2 = scen.target_fields()
    data = (l2_norm(scen.y0, grid) ** 2
            + _weighted_pairing(h_field, h_field, w["O"], grid, CONTROL_LEVELS)
            + scen.alpha[0] ** 2 * _weighted_pairing(yd1, yd1, w["Od"], grid,
                                                     CONTROL_LEVELS)
            + scen.alpha[1] ** 2 * _weighted_pairing(yd2, yd2, w["Od"], grid,
                                                     CONTROL_LEVELS))
    margin = float(np.exp(2.0 * grid.T) * (1.0 + grid.T))
    return {
        "energy_lhs": float(lhs),
        "data_norm_sq": float(data),
        "margin_factor": margin,
        "ratio": float(lhs / (margin * data)) if data > 0 else 0.0,
        "passed": bool(lhs <= margin * data),
    }
