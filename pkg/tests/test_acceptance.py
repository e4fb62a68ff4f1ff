"""End-to-end acceptance gate: one test and one printed verdict per criterion.

Each criterion is exercised at desk scale (N <= 200, M <= 400) through the
public library and CLI entry points, asserting the stated tolerances.  Run
with -s (or read the -v test lines) to see the per-criterion verdicts.
"""

from __future__ import annotations

import json

import numpy as np
import pytest

from stacknash import cli
from stacknash.control import (
    ControlData,
    build_control_operator,
    reconstruct,
    solve_lax_milgram,
    solve_linear_control,
    verify_weighted_estimates,
)
from stacknash.hierarchy import estimate_radius, liusternik_solve
from stacknash.nash import (
    CONTROL_LEVELS,
    _state_sources,
    _weighted_pairing,
    directional_gradient,
    energy_margin_report,
    estimate_convexity_threshold,
    eval_functionals,
    hessian_quadratic_form,
    solve_nash,
)
from stacknash.operators import assemble_stiffness
from stacknash.reporting import canonical_json, report_without_timings
from stacknash.scenario import (
    Grid,
    NonlocalLaw,
    l2_norm,
    load_scenario,
)
from stacknash.solvers import (
    l2q_norm,
    solve_adjoint_nonlocal,
    solve_forward_linear,
    solve_forward_nonlocal,
    solve_galerkin,
)
from stacknash.study import run_convergence_study
from stacknash.weights import (
    CERTIFIABLE_IDENTITY_EXPONENT,
    weights_for_scenario,
)

ATAN = {"family": "atan", "params": {"c0": 1.0, "c1": 0.5}}


def desk_config(**overrides):
    cfg = json.loads(json.dumps(cli.DEFAULT_CONFIG))
    cfg.update(overrides)
    return cfg


def verdict(number: int, label: str) -> None:
    print(f"acceptance criterion {number:02d} [{label}]: PASS")


def space_time_zeros(grid: Grid) -> np.ndarray:
    return np.zeros((grid.m_steps + 1, grid.n_interior + 2))


def sine_leader(scen, amp=0.05) -> np.ndarray:
    h = space_time_zeros(scen.grid)
    h[:, 1:-1] = amp * np.sin(np.pi * scen.grid.x[1:-1])
    return h


def bounded_random_fields(scen, count=3, seed=7):
    rng = np.random.default_rng(seed)
    grid = scen.grid
    out = []
    for _ in range(count):
        f = space_time_zeros(grid)
        f[:, 1:-1] = 0.01 * rng.standard_normal((grid.m_steps + 1,
                                                 grid.n_interior))
        out.append(f)
    return out


@pytest.fixture(scope="module")
def nash_setup():
    scen = load_scenario(desk_config(T=1.0, ell=ATAN))
    A = assemble_stiffness(scen.grid, scen.a_law)
    cert = solve_nash(scen, A, sine_leader(scen), n_dirs=6)
    return scen, A, cert


@pytest.fixture(scope="module")
def linear_setup():
    scen = load_scenario(desk_config())
    ws = weights_for_scenario(scen)
    op = build_control_operator(scen, ws)
    data = ControlData.zeros(scen.grid, scen.y0)
    zhat, stats = solve_lax_milgram(data, op, cg_tol=1e-12)
    res = reconstruct(zhat, op, scen, data, stats)
    return scen, op, data, res


def test_criterion_01_weight_identities():
    """rho-hat^2 = rho1 rho0 (1e-13), 3A* < 2A-hat < 0, zeta ratio constant."""
    scen = load_scenario(desk_config())
    ws = weights_for_scenario(scen)
    last = scen.grid.m_steps
    fin = slice(0, last)

    window = ws.s_budget * ws.tau_ratio[fin] <= CERTIFIABLE_IDENTITY_EXPONENT
    assert np.count_nonzero(window) >= 3
    product = np.exp(ws.log_rho0[fin][window] - ws.log_rhohat[fin][window]) \
        * np.exp(ws.log_rho1[fin][window] - ws.log_rhohat[fin][window])
    assert np.max(np.abs(product - 1.0)) <= 1e-13

    assert np.all(3.0 * ws.A_star[fin] < 2.0 * ws.A_hat[fin])
    assert np.all(ws.A_hat < 0.0)

    ratio = np.exp(ws.log_zeta_star[fin] - ws.log_zeta_hat[fin])
    assert np.max(np.abs(ratio - ws.zeta0)) <= 1e-12 * ws.zeta0
    verdict(1, "weight identities")


def test_criterion_02_manufactured_convergence():
    """Monotone errors; observed order >= 1 combined, >= 1.5 spatial-only."""
    combined = run_convergence_study("combined", levels=3, gamma=0.5)
    spatial = run_convergence_study("spatial", levels=3, gamma=0.5)
    for st in (combined, spatial):
        assert st["monotone"]
        assert len(st["levels"]) == 3
    assert all(o >= 1.0 for o in combined["orders"])
    assert all(o >= 1.5 for o in spatial["orders"])
    verdict(2, "manufactured-solution orders")


def test_criterion_03_galerkin_cross_validation():
    """Spectral-Galerkin march agrees with the finite-volume march."""
    scen = load_scenario(desk_config(T=1.0))
    grid, A = scen.grid, assemble_stiffness(scen.grid, scen.a_law)
    src = sine_leader(scen) * scen.region_weights()["O"]
    const_law = NonlocalLaw("constant", c0=1.0, c1=0.0)
    gal = solve_galerkin(grid, A, const_law, scen.y0, src, grid.n_interior)
    lin = solve_forward_linear(grid, A, 1.0, scen.y0, src)
    rel = l2q_norm(gal.field - lin, grid) / l2q_norm(lin, grid)
    assert rel <= 1e-8

    grid50 = Grid(50, 40, 1.0)
    A50 = assemble_stiffness(grid50, scen.a_law)
    y0 = np.sin(np.pi * grid50.x)
    y0[0] = y0[-1] = 0.0
    src50 = np.zeros((grid50.m_steps + 1, grid50.n_interior + 2))
    src50[:, 1:-1] = (0.5 * np.sin(2.0 * np.pi * grid50.x[1:-1])[None, :]
                      * np.exp(-grid50.t)[:, None])
    atan_law = NonlocalLaw("atan", c0=1.0, c1=0.5)
    fv = solve_forward_nonlocal(grid50, A50, atan_law, y0, src50)
    gal50 = solve_galerkin(grid50, A50, atan_law, y0, src50, 50)
    rel50 = l2q_norm(gal50.field - fv.field, grid50) \
        / l2q_norm(fv.field, grid50)
    assert rel50 <= 1e-3
    verdict(3, "Galerkin cross-validation")


def test_criterion_04_energy_bound(nash_setup):
    """Coupled solution energy within e^{2T}(1+T) of the data norm."""
    scen, A, cert = nash_setup
    rep = energy_margin_report(scen, A, cert, sine_leader(scen))
    T = scen.grid.T
    assert rep["margin_factor"] == pytest.approx(np.exp(2.0 * T) * (1.0 + T))
    assert rep["energy_lhs"] <= rep["margin_factor"] * rep["data_norm_sq"]
    assert rep["passed"]
    verdict(4, "energy bound")


def test_criterion_05_nash_first_order(nash_setup):
    """Stationarity gaps over six directions; adjoint gradient matches FD."""
    scen, A, cert = nash_setup
    scale = max(1.0, abs(cert.j1), abs(cert.j2))
    assert len(cert.duality_gaps[0]) == 6 and len(cert.duality_gaps[1]) == 6
    gap = max(max(cert.duality_gaps[0]), max(cert.duality_gaps[1]))
    assert gap <= 1e-6 * scale

    v1, v2, vhat = bounded_random_fields(scen)
    h = sine_leader(scen)
    eps = 1e-4
    for i in (0, 1):
        analytic = directional_gradient(scen, A, i, vhat, h, v1, v2)

        def j_at(d, i=i):
            a1 = v1 + d * vhat if i == 0 else v1
            a2 = v2 + d * vhat if i == 1 else v2
            rep = eval_functionals(scen, A, h, a1, a2)
            return rep.j1 if i == 0 else rep.j2

        fd = (j_at(eps) - j_at(-eps)) / (2.0 * eps)
        assert abs(analytic - fd) <= 1e-4 * max(1.0, abs(fd))
    verdict(5, "Nash first-order conditions")


def test_criterion_06_nash_second_order(nash_setup):
    """Hessian form matches FD; exact mu affinity; finite decreasing threshold."""
    scen, A, _ = nash_setup
    v1, v2, vbar = bounded_random_fields(scen, seed=11)
    h = sine_leader(scen)
    w = scen.region_weights()
    fwd = solve_forward_nonlocal(scen.grid, A, scen.ell, scen.y0,
                                 _state_sources(scen, h, v1, v2))
    yd1 = scen.target_fields()[0]
    p1 = solve_adjoint_nonlocal(scen.grid, A, scen.ell, fwd,
                                scen.alpha[0] * w["Od"] * (fwd.field - yd1))
    form = hessian_quadratic_form(scen, A, 0, vbar, fwd, p1)
    eps = 1e-3

    def j_at(d):
        return eval_functionals(scen, A, h, v1 + d * vbar, v2).j1

    fd = (j_at(eps) - 2.0 * j_at(0.0) + j_at(-eps)) / eps**2
    assert abs(form - fd) <= 1e-3 * max(1.0, abs(fd))

    delta = 0.37
    shifted = hessian_quadratic_form(scen, A, 0, vbar, fwd, p1,
                                     mu_i=scen.mu[0] + delta)
    nbar = _weighted_pairing(vbar, vbar, w["O1"], scen.grid, CONTROL_LEVELS)
    assert abs(shifted - form - delta * nbar) <= 1e-12 * max(1.0, delta * nbar)

    thresholds = []
    for scale in (1.0, 0.5):
        trial = load_scenario(desk_config(
            T=1.0, n_interior=29, m_steps=12, ell=ATAN,
            alpha=[40.0 * scale, 40.0 * scale],
            targets={"family": "sine",
                     "params": {"amp": [1.5 * scale, 2.5 * scale],
                                "mode": 1}},
            y0={"family": "sine", "params": {"amp": 0.5 * scale, "mode": 1}}))
        th = estimate_convexity_threshold(trial, sine_leader(trial,
                                                             amp=0.5 * scale),
                                          sample_dirs=2)
        assert np.isfinite(th.threshold) and th.threshold > 0.0
        assert th.rayleigh_at_threshold >= 0.0
        thresholds.append(th.threshold)
    assert thresholds[1] < thresholds[0]
    verdict(6, "Nash second-order conditions")


def test_criterion_07_linear_null_control(linear_setup):
    """Terminal smallness and stable weighted-estimate ratios under refinement."""
    scen, op, data, res = linear_setup
    assert res.terminal_norm <= 1e-6 * l2_norm(scen.y0, scen.grid)
    rep = verify_weighted_estimates(res, data, op, scen)
    for key, val in rep["ratios_kappa0"].items():
        assert np.isfinite(val) and val > 0.0, key

    fine = load_scenario(desk_config(n_interior=99, m_steps=40))
    ws_f = weights_for_scenario(fine)
    res_f = solve_linear_control(fine, ws_f)
    assert res_f.terminal_ratio <= 1e-6
    op_f = build_control_operator(fine, ws_f)
    data_f = ControlData.zeros(fine.grid, fine.y0)
    rep_f = verify_weighted_estimates(res_f, data_f, op_f, fine)
    for key in rep["ratios_kappa0"]:
        drift = rep_f["ratios_kappa0"][key] / rep["ratios_kappa0"][key]
        assert np.isfinite(drift) and drift <= 2.0, (key, drift)
    verdict(7, "linear null control and estimates")


def test_criterion_08_transposition_gap(linear_setup):
    """Weak (transposition) re-solve agrees to discretization order."""
    scen, _, _, res = linear_setup
    grid = scen.grid
    scale = max(1.0, l2_norm(scen.y0, grid))
    assert res.transposition_gap <= 5.0 * (grid.h**2 + grid.dt) * scale
    verdict(8, "transposition identity")


def test_criterion_09_hierarchy_converges():
    """Nonlocal hierarchy: geometric residual decay and a null terminal state."""
    delta = 1e-3
    cfg = desk_config(ell=ATAN,
                      y0={"family": "sine", "params": {"amp": delta,
                                                       "mode": 1}})
    result = liusternik_solve(load_scenario(cfg))
    assert result.converged
    tol = 1e-8
    hist = result.iterates
    assert all(hist[i + 1] < hist[i]
               for i in range(len(hist) - 1) if hist[i] > tol)
    assert result.contraction_factor < 0.9
    assert result.decay_ratios[0] < 0.9
    assert result.terminal_norm <= 1e-6 * delta

    const_cfg = desk_config(y0={"family": "sine",
                                "params": {"amp": delta, "mode": 1}})
    const_result = liusternik_solve(load_scenario(const_cfg))
    assert const_result.outer_iterations == 1
    assert const_result.terminal_norm <= 1e-6 * delta
    verdict(9, "hierarchical null control")


def test_criterion_10_radius_bisection():
    """Doubling/bisection returns a positive radius; failures carry messages."""
    scen = load_scenario(desk_config(
        ell=ATAN, y0={"family": "sine", "params": {"amp": 6.4e-2,
                                                   "mode": 1}}))
    rad = estimate_radius(scen, doublings=2, bisection_rounds=1, workers=2)
    assert rad["delta_star"] > 0.0
    assert rad["first_failure_delta"] is not None
    assert rad["first_failure_delta"] > rad["delta_star"]
    assert rad["failure_message"]
    failed = [s for s in rad["samples"] if not s["converged"]]
    assert failed and all(s["message"] for s in failed)
    verdict(10, "convergence-radius estimate")


def test_criterion_11_report_determinism(capsys):
    """Two runs with one seed produce byte-identical reports minus timings."""
    blobs = []
    for _ in range(2):
        code = cli.main(["control-linear", "--seed", "3"])
        assert code == 0
        blobs.append(json.loads(capsys.readouterr().out))
    assert canonical_json(report_without_timings(blobs[0])) \
        == canonical_json(report_without_timings(blobs[1]))
    assert blobs[0]["timings"] != blobs[1]["timings"]
    verdict(11, "report determinism")
