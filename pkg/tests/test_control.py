"""Tests for the weighted variational null-control construction.

The bilinear form, its conjugate gradient solve, the reconstruction of
(y, p1, p2, h), and the weighted estimate report are checked against a
dense normal-equation oracle on a tiny grid and frozen end-to-end values
on the desk-scale null-control scenario.
"""

from __future__ import annotations

import numpy as np
import pytest

from stacknash.control import (
    AdjointTriple,
    ControlData,
    apply_b,
    build_control_operator,
    data_norm,
    reconstruct,
    solve_lax_milgram,
    solve_linear_control,
    verify_weighted_estimates,
)
from stacknash.errors import ConvergenceFailure
from stacknash.scenario import l2_norm, load_scenario
from stacknash.weights import weights_for_scenario
from tests.test_scenario import base_config


def null_config(**overrides):
    cfg = base_config(T=0.5)
    cfg.update(overrides)
    return cfg


def setup(**overrides):
    scen = load_scenario(null_config(**overrides))
    ws = weights_for_scenario(scen)
    op = build_control_operator(scen, ws)
    data = ControlData.zeros(scen.grid, scen.y0)
    return scen, ws, op, data


def pack(z: AdjointTriple) -> np.ndarray:
    return np.concatenate([z.phi.ravel(), z.psi1.ravel(), z.psi2.ravel()])


def unpack(v: np.ndarray, grid) -> AdjointTriple:
    shape = (grid.m_steps + 1, grid.n_interior + 2)
    n = shape[0] * shape[1]
    return AdjointTriple(v[:n].reshape(shape).copy(),
                         v[n:2 * n].reshape(shape).copy(),
                         v[2 * n:].reshape(shape).copy())


@pytest.fixture(scope="module")
def tiny():
    return setup(n_interior=5, m_steps=4, T=1.0)


@pytest.fixture(scope="module")
def desk_result():
    scen, ws, op, data = setup()
    zhat, stats = solve_lax_milgram(data, op, cg_tol=1e-12)
    res = reconstruct(zhat, op, scen, data, stats)
    return scen, ws, op, data, res, stats


def random_triple(op, grid, rng) -> AdjointTriple:
    dim = 3 * (grid.m_steps + 1) * (grid.n_interior + 2)
    return op.mask(unpack(rng.standard_normal(dim), grid))


def test_bilinear_form_symmetric_positive_consistent(tiny):
    scen, ws, op, _ = tiny
    rng = np.random.default_rng(3)
    for _ in range(10):
        z = random_triple(op, scen.grid, rng)
        zt = random_triple(op, scen.grid, rng)
        s1 = apply_b(z, zt, op)
        s2 = apply_b(zt, z, op)
        assert abs(s1 - s2) <= 1e-13 * max(abs(s1), 1.0)
        via_matvec = float(np.vdot(pack(op.matvec(z)), pack(zt)))
        assert abs(s1 - via_matvec) <= 1e-12 * max(abs(s1), 1.0)
        assert apply_b(z, z, op) > 0.0
    zero = op.zero_triple()
    assert apply_b(zero, zero, op) == 0.0


def test_dense_oracle_matches_cg(tiny):
    scen, ws, op, data = tiny
    grid = scen.grid
    ones = AdjointTriple(*[np.ones((grid.m_steps + 1, grid.n_interior + 2))
                           for _ in range(3)])
    free = pack(op.mask(ones)) > 0.0
    assert int(np.sum(free)) == 55
    dim = free.size
    B = np.zeros((dim, dim))
    for j in np.where(free)[0]:
        ej = np.zeros(dim)
        ej[j] = 1.0
        B[:, j] = pack(op.matvec(op.mask(unpack(ej, grid))))
    rhs = pack(op.rhs(data))
    Bf = B[np.ix_(free, free)]
    d = np.sqrt(np.diag(Bf))
    scaled = Bf / d / d[:, None]
    x_free = np.linalg.solve(scaled, rhs[free] / d) / d
    x_dense = np.zeros(dim)
    x_dense[free] = x_free
    zhat, stats = solve_lax_milgram(data, op, cg_tol=1e-13)
    rel = np.max(np.abs(pack(zhat) - x_dense)) / np.max(np.abs(x_dense))
    assert rel <= 1e-8
    assert stats.converged


def test_cg_energy_monotone(desk_result):
    _, _, _, _, _, stats = desk_result
    e = stats.energy_history
    scale = float(np.max(np.abs(e)))
    assert np.all(np.diff(e) <= 1e-12 * scale)


def test_zero_data_returns_zero(tiny):
    scen, ws, op, _ = tiny
    zdata = ControlData.zeros(scen.grid)
    zhat, stats = solve_lax_milgram(zdata, op, cg_tol=1e-12)
    assert stats.iterations == 0
    res = reconstruct(zhat, op, scen, zdata, stats)
    assert np.max(np.abs(res.y)) == 0.0
    assert res.terminal_norm == 0.0
    assert res.kappa0 == 0.0


def test_linearity_under_data_scaling(desk_result):
    scen, ws, op, data, _, _ = desk_result
    z1, _ = solve_lax_milgram(data, op, cg_tol=1e-12)
    data2 = ControlData(-2.0 * data.y0, -2.0 * data.H, -2.0 * data.H1,
                        -2.0 * data.H2)
    z2, _ = solve_lax_milgram(data2, op, cg_tol=1e-12)
    num = max(np.max(np.abs(z2.phi + 2.0 * z1.phi)),
              np.max(np.abs(z2.psi1 + 2.0 * z1.psi1)),
              np.max(np.abs(z2.psi2 + 2.0 * z1.psi2)))
    den = max(np.max(np.abs(z1.phi)), np.max(np.abs(z1.psi1)),
              np.max(np.abs(z1.psi2)))
    assert num <= 1e-10 * 2.0 * den


def test_null_control_reaches_tolerance(desk_result):
    _, _, _, _, res, _ = desk_result
    assert res.terminal_ratio <= 1e-6
    assert res.terminal_ratio == pytest.approx(8.778513e-08, rel=1e-3)
    assert res.kappa0 == pytest.approx(5.0e-05, rel=1e-9)
    assert res.weighted_norms["frozen_data_norm"] == 0.0


def test_transposition_gap_within_order(desk_result):
    scen, _, _, _, res, _ = desk_result
    grid = scen.grid
    bound = 5.0 * (grid.h**2 + grid.dt)
    assert res.transposition_gap <= bound
    assert res.transposition_gap == pytest.approx(1.212288e-07, rel=1e-2)


def test_h_vanishes_near_terminal():
    scen, ws, _, _ = setup(n_interior=99, m_steps=40)
    res = solve_linear_control(scen, ws)
    hmax = float(np.max(np.abs(res.h)))
    hlast = float(np.max(np.abs(res.h[scen.grid.m_steps - 1])))
    assert hlast <= 1e-8 * hmax


def test_estimate_ratios_finite_and_stable(desk_result):
    scen, ws, op, data, res, _ = desk_result
    rep = verify_weighted_estimates(res, data, op, scen)
    assert rep["kappa1"] == pytest.approx(3.65558896e-04, rel=1e-9)
    assert rep["regularity_window_levels"] == 15
    expected = {
        "states_and_control": 2.92500008e-20,
        "sup_rhohat_state": 1.23327040e-27,
        "rhohat_dissipation": 4.25615173e-28,
        "sup_rho1_gradient": 1.36569799e-41,
        "rho1_time_regularity": 6.58104632e-40,
    }
    for key, val in expected.items():
        got = rep["ratios_kappa0"][key]
        assert np.isfinite(got) and got > 0.0
        assert got == pytest.approx(val, rel=1e-3), key
        assert got <= 1e4

    fine_scen, fine_ws, fine_op, fine_data = setup(n_interior=99, m_steps=40)
    fine_z, fine_stats = solve_lax_milgram(fine_data, fine_op, cg_tol=1e-12)
    fine_res = reconstruct(fine_z, fine_op, fine_scen, fine_data, fine_stats)
    assert fine_res.terminal_ratio <= 1e-6
    fine_rep = verify_weighted_estimates(fine_res, fine_data, fine_op,
                                         fine_scen)
    for key in expected:
        drift = fine_rep["ratios_kappa0"][key] / rep["ratios_kappa0"][key]
        assert np.isfinite(drift) and drift <= 2.0, (key, drift)


def test_terminal_norm_monotone_in_s():
    norms = []
    for s in (0.5, 1.0, 2.0):
        scen = load_scenario(base_config(carleman={"s": s}))
        ws = weights_for_scenario(scen)
        res = solve_linear_control(scen, ws)
        norms.append(res.terminal_norm)
    assert norms[0] > norms[1] > norms[2]
    assert norms[0] == pytest.approx(3.490693e-10, rel=1e-2)
    assert norms[2] == pytest.approx(8.822342e-12, rel=1e-2)


def test_kappa1_dominates_kappa0(tiny):
    scen, ws, _, data = tiny
    k0 = data_norm(data, ws, scen.grid)
    k1 = data_norm(data, ws, scen.grid, a_law=scen.a_law)
    assert k1 >= k0


def test_cg_stagnation_raises(desk_result):
    _, _, op, data, _, _ = desk_result
    with pytest.raises(ConvergenceFailure):
        solve_lax_milgram(data, op, cg_tol=1e-12, max_iter=5)


def test_reconstruction_vanishes_at_terminal_row(desk_result):
    scen, _, _, _, res, _ = desk_result
    m = scen.grid.m_steps
    assert np.all(res.y[m] == 0.0)
    assert np.all(res.p1[m] == 0.0)
    assert np.all(res.p2[m] == 0.0)
    assert np.all(res.h[0] == 0.0)
    assert l2_norm(res.y_resolved[m], scen.grid) == res.terminal_norm
