"""Outer nonlinear loop: residual map, Newton-at-zero iteration, certificates.

Frozen reference values come from independent oracle runs of the same
discretization assembled outside the package module (straight NumPy
transcriptions of the map), recorded at the desk-scale configuration below.
"""

from __future__ import annotations

import numpy as np
import pytest

from stacknash.control import _rho2_weighted_sq
from stacknash.errors import ConvergenceFailure
from stacknash.hierarchy import (
    CONSISTENCY_FACTOR,
    HierarchyResult,
    ResidualQuadruple,
    _residual_rows,
    certify_result,
    estimate_radius,
    eval_A,
    liusternik_solve,
)
from stacknash.operators import assemble_stiffness
from stacknash.scenario import load_scenario
from stacknash.weights import weights_for_scenario

ATAN = {"family": "atan", "params": {"c0": 1.0, "c1": 0.5}}


def hier_config(**overrides):
    cfg = {
        "T": 0.5,
        "n_interior": 49,
        "m_steps": 20,
        "gamma": 0.5,
        "ell": {"family": "constant", "params": {"c0": 1.0}},
        "regions": {
            "O": [0.3, 0.8],
            "O1": [0.2, 0.5],
            "O2": [0.55, 0.85],
            "Od": [0.4, 0.7],
        },
        "alpha": [1.0, 1.0],
        "mu": [2.0, 2.0],
        "y0": {"family": "sine", "params": {"amp": 1e-3, "mode": 1}},
    }
    cfg.update(overrides)
    return cfg


@pytest.fixture(scope="module")
def linear_result():
    scen = load_scenario(hier_config())
    return scen, liusternik_solve(scen)


@pytest.fixture(scope="module")
def atan_result():
    scen = load_scenario(hier_config(ell=ATAN))
    return scen, liusternik_solve(scen)


def zero_iterate(scen):
    shape = (scen.grid.m_steps + 1, scen.grid.n_interior + 2)
    return tuple(np.zeros(shape) for _ in range(4))


# ---------------------------------------------------------------------------
# eval_A
# ---------------------------------------------------------------------------


class TestEvalA:
    def test_zero_iterate_zero_datum_vanishes(self):
        scen = load_scenario(hier_config(y0={"family": "zero", "params": {}}))
        quad = eval_A(zero_iterate(scen), scen)
        assert quad.weighted_norm == 0.0
        assert np.all(quad.r0.values == 0.0)
        assert np.all(quad.r3 == 0.0)

    def test_zero_iterate_measures_initial_datum(self):
        # With z = 0 only r3 = -y0 survives; the norm is ||y0||_{H1_a}.
        scen = load_scenario(hier_config())
        quad = eval_A(zero_iterate(scen), scen)
        assert quad.components["r0"] == 0.0
        assert quad.components["r1"] == 0.0
        assert quad.norm == pytest.approx(1.911959456e-03, rel=1e-9)

    def test_linear_solution_residual_at_solver_floor(self, linear_result):
        scen, res = linear_result
        quad = eval_A((res.y, res.p1, res.p2, res.h), scen)
        assert quad.norm <= 1e-9
        assert quad.components["r3"] <= 1e-24

    def test_frozen_map_identical_for_constant_law(self, linear_result):
        # l' = 0 and l = l0 make the full map and its derivative coincide
        # bitwise (zero targets), so the remainder is exactly zero.
        scen, res = linear_result
        z = (res.y, res.p1, res.p2, res.h)
        full = eval_A(z, scen)
        froz = eval_A(z, scen, frozen=True)
        assert np.array_equal(full.r0.values, froz.r0.values)
        assert np.array_equal(full.r1.values, froz.r1.values)
        assert np.array_equal(full.r2.values, froz.r2.values)

    def test_perturbation_order_quadratic(self):
        # ||A(eps z) - eps DA(0) z|| must shrink like eps^2: the remainder
        # collects exactly the terms quadratic in the iterate.
        scen = load_scenario(hier_config(ell=ATAN))
        grid = scen.grid
        ws = weights_for_scenario(scen)
        A = assemble_stiffness(grid, scen.a_law)
        tt, x = grid.t, grid.x
        bump = np.where(tt < grid.T / 2, (tt * (grid.T / 2 - tt)) ** 2, 0.0)
        bump /= np.max(bump)
        fields = []
        for prof in (np.sin(np.pi * x), np.sin(2 * np.pi * x),
                     x * (1 - x) ** 2):
            f = bump[:, None] * prof
            f[:, 0] = f[:, -1] = 0.0
            fields.append(f)
        hb = bump[:, None] * np.cos(3 * x) * scen.region_weights()["O"]
        z = (fields[0], fields[1], fields[2], hb)
        expected = {1e-2: 2.579007e-08, 1e-3: 2.579038e-10}
        got = {}
        for eps in expected:
            zs = tuple(eps * f for f in z)
            full = _residual_rows(zs, scen, A, frozen=False)
            froz = _residual_rows(zs, scen, A, frozen=True)
            wn = sum(
                _rho2_weighted_sq(ws, grid, a - b, levels)
                for a, b, levels in zip(full, froz, (slice(1, None),
                                                     slice(1, -1),
                                                     slice(1, -1))))
            got[eps] = np.sqrt(wn)
            assert got[eps] == pytest.approx(expected[eps], rel=1e-4)
        assert got[1e-2] / got[1e-3] == pytest.approx(100.0, abs=1.0)


# ---------------------------------------------------------------------------
# liusternik_solve
# ---------------------------------------------------------------------------


class TestLiusternikSolve:
    def test_constant_law_single_outer_iteration(self, linear_result):
        scen, res = linear_result
        assert res.converged
        assert res.outer_iterations == 1
        assert len(res.iterates) == 2
        assert res.iterates[1] == pytest.approx(1.403471461e-10, rel=1e-6)
        assert res.decay_ratios[0] < 0.9

    def test_terminal_norm_below_relative_bound(self, linear_result):
        scen, res = linear_result
        assert res.terminal_norm == pytest.approx(8.428899e-11, rel=1e-4)
        assert res.terminal_norm <= 1e-6 * 1e-3

    def test_delta_is_initial_datum_graph_norm(self, linear_result):
        scen, res = linear_result
        assert res.delta == pytest.approx(1.911959456e-03, rel=1e-9)

    def test_atan_law_two_solves_with_recorded_decay(self, atan_result):
        scen, res = atan_result
        assert res.converged
        assert res.outer_iterations == 2
        assert res.iterates[1] == pytest.approx(1.491444964e-10, rel=1e-6)
        assert res.contraction_factor == pytest.approx(3.165993e-04, rel=1e-4)
        assert res.contraction_factor < 0.9

    def test_atan_remainder_correction_fixes_terminal(self, atan_result):
        # The first iterate crushes only the frozen system; its re-marched
        # terminal misses the bound and one correction solve repairs it.
        scen, res = atan_result
        assert res.terminal_history[0] == pytest.approx(1.949731e-09,
                                                        rel=1e-4)
        assert res.terminal_norm == pytest.approx(1.166750e-10, rel=1e-4)
        assert res.terminal_norm <= 1e-6 * 1e-3

    def test_residuals_decrease_until_tolerance(self, atan_result):
        scen, res = atan_result
        tol = scen.solver["liusternik_tol"]
        for a, b in zip(res.iterates, res.iterates[1:]):
            if a > tol:
                assert b < a

    def test_limit_satisfies_the_map(self, atan_result):
        scen, res = atan_result
        quad = eval_A((res.y, res.p1, res.p2, res.h), scen)
        assert quad.norm <= scen.solver["liusternik_tol"]
        assert np.sqrt(quad.components["r3"]) <= 1e-12

    def test_follower_feedback_sign_and_support(self, atan_result):
        scen, res = atan_result
        w = scen.region_weights()
        on1 = w["O1"] > 0.0
        assert np.array_equal(res.v1, -res.p1 / scen.mu[0] * on1)
        assert np.all(res.v1[:, ~on1] == 0.0)
        assert np.all(res.h[:, w["O"] == 0.0] == 0.0)

    def test_divergence_reported_with_advice(self):
        scen = load_scenario(hier_config(
            ell=ATAN, y0={"family": "sine",
                          "params": {"amp": 0.256, "mode": 1}}))
        with pytest.raises(ConvergenceFailure, match="reduce the initial"):
            try:
                liusternik_solve(scen)
            except ConvergenceFailure as exc:
                assert "residual_history" in exc.diagnostics
                raise


# ---------------------------------------------------------------------------
# certify_result
# ---------------------------------------------------------------------------


class TestCertify:
    def test_linear_certificate_gaps_trivial(self, linear_result):
        scen, res = linear_result
        cert = certify_result(res, scen)
        assert max(cert["nash_gaps"]) <= 1e-8
        assert cert["solution_norms_finite"]

    def test_refined_residual_first_order_consistent(self, atan_result):
        # Re-evaluating interpolated fields on the doubled grid measures
        # interpolation/truncation error, not the solver floor; the
        # certificate normalizes by (dt + h^2) * delta.
        scen, res = atan_result
        cert = certify_result(res, scen)
        assert cert["refined_residual"] == pytest.approx(2.9235880e-05,
                                                         rel=1e-4)
        assert cert["consistency_ratio"] == pytest.approx(0.60201, rel=1e-3)
        assert cert["first_order_consistent"]
        assert cert["consistency_ratio"] <= CONSISTENCY_FACTOR
        assert cert["window_levels"] == {"coarse": 20, "refined": 39}

    def test_certificate_support_and_feedback_identities(self, atan_result):
        scen, res = atan_result
        cert = certify_result(res, scen)
        assert cert["leader_outside_support"] == 0.0
        assert cert["follower_feedback_defect"] == 0.0
        assert max(cert["nash_gaps"]) <= 1e-8

    def test_solution_norm_split_matches_aggregate(self, atan_result):
        scen, res = atan_result
        n = res.weighted_norms
        split = n["weighted_y_sq"] + n["weighted_p1_sq"] + n["weighted_p2_sq"]
        assert split == pytest.approx(n["weighted_state_sq"], rel=1e-9)
        assert n["weighted_y_sq"] == pytest.approx(1.4625e-26, rel=1e-3)


# ---------------------------------------------------------------------------
# estimate_radius
# ---------------------------------------------------------------------------


class TestEstimateRadius:
    def test_ladder_finds_positive_radius_and_reports_failure(self):
        scen = load_scenario(hier_config(
            ell=ATAN, y0={"family": "sine",
                          "params": {"amp": 6.4e-2, "mode": 1}}))
        rad = estimate_radius(scen, doublings=2, bisection_rounds=1,
                              workers=2)
        assert rad["delta_star"] > 0.0
        assert rad["scale_star"] >= 1.0
        assert rad["first_failure_delta"] is not None
        assert rad["first_failure_delta"] > rad["delta_star"]
        assert "reduce the initial datum" in rad["failure_message"]
        converged = [s for s in rad["samples"] if s["converged"]]
        assert converged
        assert all(s["contraction_factor"] < 1.0 for s in converged)

    def test_samples_record_solve_counts(self):
        scen = load_scenario(hier_config(ell=ATAN))
        rad = estimate_radius(scen, doublings=1, bisection_rounds=0,
                              workers=2)
        assert [s["scale"] for s in rad["samples"]] == [1.0, 2.0]
        assert all(s["solves"] == 2 for s in rad["samples"])
        assert rad["failure_message"] is None
