"""Command-line harness over the scenario, solver and certificate layers.

Subcommands
-----------
simulate            uncontrolled quasilinear forward march
nash                follower equilibrium under a reference leader field
control-linear      weighted linearized null control plus a-priori estimates
control-nonlinear   hierarchical null control, certificate and radius probe
weights-check       weight-family identities and domination constants
convergence-study   manufactured-solution error tables with observed orders
certify             re-solve a scenario and audit the resulting controls

Every command prints one canonical JSON report to stdout; with --out DIR the
same report, delimited CSV tables and PNG figures are written into DIR
(--no-figures suppresses the PNGs).  Reports embed the fully resolved
configuration and are bit-identical across runs up to the "timings" object.

Exit codes: 0 success, 2 invariant or check failure, 3 solver
non-convergence, 4 configuration error.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import figures
from .control import ControlData, build_control_operator, solve_linear_control, \
    verify_weighted_estimates
from .errors import ConfigError, ConvergenceFailure, InvariantViolation
from .hierarchy import CONSISTENCY_FACTOR, certify_result, estimate_radius, \
    liusternik_solve
from .nash import energy_margin_report, eval_functionals, solve_nash
from .operators import assemble_stiffness
from .reporting import build_report, canonical_json, write_field_csv, \
    write_report, write_table_csv
from .scenario import Scenario, l2_norm, load_scenario
from .solvers import solve_forward_nonlocal
from .study import run_convergence_study
from .weights import CERTIFIABLE_IDENTITY_EXPONENT, check_weight_domination, \
    weights_for_scenario

#: Scenario used when no --config is given: degenerate diffusion sqrt(x),
#: constant nonlocal factor, the standard staggered control regions and a
#: one-bump initial datum small enough for the nonlinear hierarchy.
DEFAULT_CONFIG = {
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
    "y0": {"family": "sine", "params": {"amp": 0.01, "mode": 1}},
}

#: Leader field used by the `nash` subcommand: a fixed reference profile so
#: the follower game is well posed without running the outer hierarchy.
REFERENCE_LEADER_AMP = 0.05


@contextmanager
def _phase(timings: dict, name: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[name] = time.perf_counter() - start


def _zero_field(scen: Scenario) -> np.ndarray:
    g = scen.grid
    return np.zeros((g.m_steps + 1, g.n_interior + 2))


def _reference_leader(scen: Scenario) -> np.ndarray:
    h = _zero_field(scen)
    h[:, 1:-1] = REFERENCE_LEADER_AMP * np.sin(np.pi * scen.grid.x[1:-1])
    return h


def _load_config(args: argparse.Namespace) -> dict:
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"scenario file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario file is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("scenario must be a JSON object")
    else:
        cfg = copy.deepcopy(DEFAULT_CONFIG)

    solver = dict(cfg.get("solver", {}))
    if args.seed is not None:
        solver["seed"] = args.seed
    if args.cg_tol is not None:
        solver["cg_tol"] = args.cg_tol
    if args.null_tol is not None:
        solver["null_tol"] = args.null_tol
    if solver:
        cfg["solver"] = solver

    carleman = dict(cfg.get("carleman", {}))
    if args.s is not None:
        carleman["s"] = args.s
    if args.lam is not None:
        carleman["lambda"] = args.lam
    if carleman:
        cfg["carleman"] = carleman
    return cfg


# ---------------------------------------------------------------------------
# command handlers: scenario -> (outcomes, checks), artifacts into out_dir
# ---------------------------------------------------------------------------

def _cmd_simulate(scen, args, out_dir, render, timings):
    grid = scen.grid
    with _phase(timings, "solve"):
        A = assemble_stiffness(grid, scen.a_law)
        fwd = solve_forward_nonlocal(
            grid, A, scen.ell, scen.y0, _zero_field(scen),
            tol=scen.solver["picard_tol"],
            max_iter=scen.solver["picard_max_iter"])
    initial = l2_norm(scen.y0, grid)
    terminal = l2_norm(fwd.field[-1], grid)
    outcomes = {
        "initial_norm": initial,
        "terminal_norm": terminal,
        "decay_ratio": terminal / initial if initial > 0.0 else 0.0,
        "mean_initial": float(fwd.g[0]),
        "mean_final": float(fwd.g[-1]),
        "max_picard_iterations": fwd.max_picard,
    }
    checks = {
        "state_finite": bool(np.all(np.isfinite(fwd.field))),
        "dissipative": terminal <= initial or initial == 0.0,
    }
    if out_dir is not None:
        with _phase(timings, "outputs"):
            write_field_csv(out_dir, "y", fwd.field, grid)
            if render:
                figures.field_heatmap(out_dir, "y", fwd.field, grid,
                                      "uncontrolled state y(t, x)")
                figures.line_plot(out_dir, "mean_state",
                                  {"integral of y": (grid.t, fwd.g)},
                                  "t", "integral of y", "nonlocal argument g(t)")
    return outcomes, checks


def _cmd_nash(scen, args, out_dir, render, timings):
    grid = scen.grid
    h_field = _reference_leader(scen)
    with _phase(timings, "solve"):
        A = assemble_stiffness(grid, scen.a_law)
        cert = solve_nash(scen, A, h_field, n_dirs=6)
    with _phase(timings, "verify"):
        rep = eval_functionals(scen, A, h_field, cert.v1, cert.v2)
        energy = energy_margin_report(scen, A, cert, h_field)
    scale = max(1.0, abs(cert.j1), abs(cert.j2))
    max_gap = max(max(cert.duality_gaps[0]), max(cert.duality_gaps[1]))
    outcomes = {
        "j1": cert.j1,
        "j2": cert.j2,
        "tracking": list(rep.tracking),
        "cost": list(rep.cost),
        "gradient_norms": list(rep.gradient_norms),
        "max_duality_gap": max_gap,
        "duality_gaps": [list(cert.duality_gaps[0]), list(cert.duality_gaps[1])],
        "hessian_rayleigh": list(cert.hessian_rayleigh),
        "fixed_point_iterations": cert.iterations,
        "fixed_point_residual": cert.residual,
        "energy": energy,
    }
    checks = {
        "first_order_stationary": max_gap <= 1e-6 * scale,
        "second_order_convex": min(cert.hessian_rayleigh) >= 0.0,
        "energy_margin": bool(energy["passed"]),
    }
    if out_dir is not None:
        with _phase(timings, "outputs"):
            write_field_csv(out_dir, "v1", cert.v1, grid)
            write_field_csv(out_dir, "v2", cert.v2, grid)
            write_field_csv(out_dir, "y", cert.y, grid)
            if render:
                figures.field_heatmap(out_dir, "v1", cert.v1, grid,
                                      "follower control v1")
                figures.field_heatmap(out_dir, "v2", cert.v2, grid,
                                      "follower control v2")
                figures.field_heatmap(out_dir, "y", cert.y, grid,
                                      "equilibrium state y(t, x)")
    return outcomes, checks


def _cmd_control_linear(scen, args, out_dir, render, timings):
    grid = scen.grid
    with _phase(timings, "solve"):
        ws = weights_for_scenario(scen)
        data = ControlData.zeros(grid, scen.y0)
        result = solve_linear_control(scen, ws, data)
    with _phase(timings, "verify"):
        op = build_control_operator(scen, ws)
        estimates = verify_weighted_estimates(result, data, op, scen)
    outcomes = {
        "terminal_norm": result.terminal_norm,
        "terminal_ratio": result.terminal_ratio,
        "cg_iterations": result.cg_iters,
        "cg_residual": result.cg_residual,
        "kappa0": result.kappa0,
        "transposition_gap": result.transposition_gap,
        "weighted_norms": result.weighted_norms,
        "estimates": estimates,
    }
    lhs = estimates["left_sides"]
    checks = {
        "terminal_null": result.terminal_ratio <= scen.solver["null_tol"],
        "estimates_finite": bool(all(np.isfinite(v) for v in lhs.values())),
        "transposition_finite": bool(np.isfinite(result.transposition_gap)),
    }
    if out_dir is not None:
        with _phase(timings, "outputs"):
            write_field_csv(out_dir, "h", result.h, grid)
            write_field_csv(out_dir, "y", result.y, grid)
            if render:
                figures.field_heatmap(out_dir, "h", result.h, grid,
                                      "leader control h")
                figures.field_heatmap(out_dir, "y", result.y, grid,
                                      "controlled state y(t, x)")
    return outcomes, checks


def _hierarchy_outcomes(result, certificate) -> dict:
    return {
        "outer_iterations": result.outer_iterations,
        "residual_history": list(result.iterates),
        "terminal_history": list(result.terminal_history),
        "decay_ratios": result.decay_ratios,
        "contraction_factor": result.contraction_factor,
        "terminal_norm": result.terminal_norm,
        "delta": result.delta,
        "cg_iterations": list(result.cg_iterations),
        "certificate": certificate,
    }


def _hierarchy_checks(scen, result, certificate) -> dict:
    hist = result.iterates
    tol = scen.solver["liusternik_tol"]
    decreasing = all(hist[i + 1] < hist[i]
                     for i in range(len(hist) - 1) if hist[i] > tol)
    return {
        "terminal_null": result.terminal_norm
        <= scen.solver["null_tol"] * l2_norm(scen.y0, scen.grid),
        "residuals_decreasing": decreasing,
        "first_order_consistent": bool(certificate["first_order_consistent"]),
        "solution_norms_finite": bool(certificate["solution_norms_finite"]),
        "nash_gaps_stationary": max(certificate["nash_gaps"]) <= 1e-6,
        "leader_supported_in_O": certificate["leader_outside_support"] == 0.0,
        "feedback_identity": certificate["follower_feedback_defect"] == 0.0,
    }


def _write_hierarchy_artifacts(scen, result, out_dir, render, timings):
    grid = scen.grid
    with _phase(timings, "outputs"):
        write_field_csv(out_dir, "h", result.h, grid)
        write_field_csv(out_dir, "v1", result.v1, grid)
        write_field_csv(out_dir, "v2", result.v2, grid)
        write_field_csv(out_dir, "y", result.y, grid)
        if render:
            steps = np.arange(len(result.iterates))
            figures.semilogy_lines(
                out_dir, "residual_history",
                {"weighted residual": (steps, np.asarray(result.iterates))},
                "linearized solves", "residual norm",
                "outer-iteration residual decay")
            figures.field_heatmap(out_dir, "h", result.h, grid,
                                  "leader control h")
            figures.field_heatmap(out_dir, "y", result.y, grid,
                                  "controlled state y(t, x)")


def _cmd_control_nonlinear(scen, args, out_dir, render, timings):
    with _phase(timings, "solve"):
        result = liusternik_solve(scen)
    with _phase(timings, "verify"):
        certificate = certify_result(result, scen)
    outcomes = _hierarchy_outcomes(result, certificate)
    checks = _hierarchy_checks(scen, result, certificate)
    if not args.no_radius:
        with _phase(timings, "radius"):
            radius = estimate_radius(scen, doublings=args.radius_doublings,
                                     bisection_rounds=2)
        outcomes["radius"] = radius
        checks["radius_positive"] = radius["delta_star"] > 0.0
        checks["radius_failure_reported"] = (
            radius["first_failure_delta"] is None
            or radius["failure_message"] is not None)
    if out_dir is not None:
        _write_hierarchy_artifacts(scen, result, out_dir, render, timings)
    return outcomes, checks


def _cmd_certify(scen, args, out_dir, render, timings):
    with _phase(timings, "solve"):
        result = liusternik_solve(scen)
    with _phase(timings, "verify"):
        certificate = certify_result(result, scen)
    outcomes = _hierarchy_outcomes(result, certificate)
    checks = _hierarchy_checks(scen, result, certificate)
    checks["residual_refinement_consistent"] = (
        certificate["consistency_ratio"] <= CONSISTENCY_FACTOR)
    if out_dir is not None:
        _write_hierarchy_artifacts(scen, result, out_dir, render, timings)
    return outcomes, checks


def _cmd_weights_check(scen, args, out_dir, render, timings):
    grid = scen.grid
    with _phase(timings, "solve"):
        ws = weights_for_scenario(scen)
    with _phase(timings, "verify"):
        last = grid.m_steps
        fin = slice(0, last)
        cert = ws.s_budget * ws.tau_ratio[fin] <= CERTIFIABLE_IDENTITY_EXPONENT
        product = np.exp(ws.log_rho0[fin][cert] - ws.log_rhohat[fin][cert]) \
            * np.exp(ws.log_rho1[fin][cert] - ws.log_rhohat[fin][cert])
        identity_defect = float(np.max(np.abs(product - 1.0)))
        separation_margin = float(np.max(3.0 * ws.A_star[fin]
                                         - 2.0 * ws.A_hat[fin]))
        amplitude_max = float(np.max(2.0 * ws.A_hat[fin]))
        ratio = np.exp(ws.log_zeta_star[fin] - ws.log_zeta_hat[fin])
        zeta_drift = float(np.max(np.abs(ratio - ws.zeta0)) / ws.zeta0)
        domination = check_weight_domination(ws, grid)
        terminal_values = [float(ws.inv_rho0_sq[last]),
                           float(ws.inv_rho1_sq[last]),
                           float(ws.inv_rho2_sq[last])]
    outcomes = {
        "s": ws.s,
        "lambda": ws.lam,
        "s_effective": ws.s_eff,
        "zeta0": ws.zeta0,
        "nu_hat_ratio": ws.nu_hat_ratio,
        "chain_constant": ws.chain_constant,
        "identity_defect": identity_defect,
        "identity_window_levels": int(np.count_nonzero(cert)),
        "separation_margin": separation_margin,
        "amplitude_max": amplitude_max,
        "zeta_ratio_drift": zeta_drift,
        "terminal_inverse_weights": terminal_values,
        "domination": domination,
    }
    checks = {
        "product_identity": identity_defect <= 1e-13,
        "profile_separation": separation_margin < 0.0,
        "profiles_negative": amplitude_max < 0.0,
        "zeta_ratio_constant": zeta_drift <= 1e-12,
        "terminal_weights_vanish": all(v == 0.0 for v in terminal_values),
        "domination_constants_finite": bool(domination["passed"]),
    }
    if out_dir is not None:
        with _phase(timings, "outputs"):
            rows = [[int(k), float(grid.t[k]), float(ws.tau_ratio[k]),
                     float(ws.log_rho0[k]), float(ws.log_rho1[k]),
                     float(ws.log_rho2[k]), float(ws.log_rhohat[k])]
                    for k in range(last + 1)]
            write_table_csv(out_dir, "weights",
                            ["level", "t", "tau_ratio", "log_rho0",
                             "log_rho1", "log_rho2", "log_rhohat"], rows)
            if render:
                t = grid.t[fin]
                figures.line_plot(
                    out_dir, "weights",
                    {"log rho0": (t, ws.log_rho0[fin]),
                     "log rho1": (t, ws.log_rho1[fin]),
                     "log rho2": (t, ws.log_rho2[fin]),
                     "log rho-hat": (t, ws.log_rhohat[fin])},
                    "t", "log weight", "Carleman weight profiles")
    return outcomes, checks


def _cmd_convergence_study(scen, args, out_dir, render, timings):
    studies = {}
    with _phase(timings, "solve"):
        for mode in ("combined", "spatial", "time"):
            studies[mode] = run_convergence_study(
                mode, levels=args.levels, gamma=scen.a_law.gamma)
    outcomes = {"studies": studies, "levels": args.levels}
    checks = {
        "combined_monotone": studies["combined"]["monotone"],
        "spatial_monotone": studies["spatial"]["monotone"],
        "time_monotone": studies["time"]["monotone"],
        "combined_order_at_least_one":
            all(o >= 1.0 for o in studies["combined"]["orders"]),
        "spatial_order_at_least_three_halves":
            all(o >= 1.5 for o in studies["spatial"]["orders"]),
    }
    if out_dir is not None:
        with _phase(timings, "outputs"):
            rows = []
            for mode, st in studies.items():
                for lvl, row in enumerate(st["levels"]):
                    rows.append([mode, lvl, row["n_interior"], row["m_steps"],
                                 float(row["error"]),
                                 "" if row["order"] is None
                                 else float(row["order"])])
            write_table_csv(out_dir, "study",
                            ["mode", "level", "n_interior", "m_steps",
                             "error", "order"], rows)
            if render:
                series = {mode: (np.arange(len(st["levels"])),
                                 np.array([r["error"] for r in st["levels"]]))
                          for mode, st in studies.items()}
                figures.semilogy_lines(out_dir, "study", series,
                                       "refinement level", "terminal error",
                                       "manufactured-solution convergence")
    return outcomes, checks


_HANDLERS = {
    "simulate": _cmd_simulate,
    "nash": _cmd_nash,
    "control-linear": _cmd_control_linear,
    "control-nonlinear": _cmd_control_nonlinear,
    "weights-check": _cmd_weights_check,
    "convergence-study": _cmd_convergence_study,
    "certify": _cmd_certify,
}


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="scenario JSON file (defaults to a built-in case)")
    common.add_argument("--out", metavar="DIR",
                        help="directory for report.json, CSV tables and figures")
    common.add_argument("--seed", type=int, metavar="N",
                        help="override solver.seed")
    common.add_argument("--s", type=float, metavar="REAL",
                        help="override carleman.s")
    common.add_argument("--lambda", dest="lam", type=float, metavar="REAL",
                        help="override carleman.lambda")
    common.add_argument("--cg-tol", type=float, metavar="REAL",
                        help="override solver.cg_tol")
    common.add_argument("--null-tol", type=float, metavar="REAL",
                        help="override solver.null_tol")
    common.add_argument("--levels", type=int, default=4, metavar="N",
                        help="refinement levels for convergence-study")
    common.add_argument("--no-figures", action="store_true",
                        help="skip PNG rendering in the output directory")

    parser = argparse.ArgumentParser(
        prog="stacknash",
        description="hierarchical null control of a degenerate nonlocal "
                    "parabolic equation")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "march the uncontrolled quasilinear state",
        "nash": "solve the follower game under a reference leader",
        "control-linear": "linearized null control with weighted estimates",
        "control-nonlinear": "hierarchical null control with certificate",
        "weights-check": "verify the Carleman weight family",
        "convergence-study": "manufactured-solution convergence orders",
        "certify": "re-solve and audit the hierarchical controls",
    }
    for name, handler in _HANDLERS.items():
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "control-nonlinear":
            p.add_argument("--no-radius", action="store_true",
                           help="skip the convergence-radius probe")
            p.add_argument("--radius-doublings", type=int, default=4,
                           metavar="N",
                           help="doubling steps in the radius probe")
    return parser


def _emit_failure(command: str, kind: str, exc: Exception) -> None:
    blob = {
        "report_version": 1,
        "command": command,
        "error": {"kind": kind, "message": str(exc)},
    }
    diagnostics = getattr(exc, "diagnostics", None)
    if diagnostics:
        blob["error"]["diagnostics"] = diagnostics
    print(canonical_json(blob))
    print(f"{kind}: {exc}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    timings: dict[str, float] = {}
    try:
        with _phase(timings, "setup"):
            scen = load_scenario(_load_config(args))
        out_dir = None if args.out is None else Path(args.out)
        render = out_dir is not None and not args.no_figures
        outcomes, checks = _HANDLERS[args.command](
            scen, args, out_dir, render, timings)
    except ConfigError as exc:
        _emit_failure(args.command, "config-error", exc)
        return 4
    except ConvergenceFailure as exc:
        _emit_failure(args.command, "convergence-failure", exc)
        return 3
    except InvariantViolation as exc:
        _emit_failure(args.command, "invariant-violation", exc)
        return 2

    with _phase(timings, "report"):
        report = build_report(args.command, scen, outcomes, checks, timings)
    report["timings"] = timings
    print(canonical_json(report))
    if out_dir is not None:
        write_report(report, out_dir)
    return 0 if report["passed"] else 2


if __name__ == "__main__":
    sys.exit(main())
