"""Manufactured-solution convergence studies on nested grids.

The degenerate study case is corner-adapted to the diffusion law a(x) = x^g:
the profile x^{s}(1-x) with s = 1.5 + 1/4 keeps the flux a(x) u_x in C^1
up to the degenerate endpoint, so the flux-difference truncation there does
not cap the observed spatial rate at one.  The time factor cos(t/2) keeps
the backward-Euler error component small and of constructive sign, so the
combined path (h and dt halved together) shows the full mixed rate instead
of a cancellation plateau.

Three refinement paths are provided:
  combined  - h and dt halved together, degenerate coefficient,
  spatial   - N doubled at fixed M on a short horizon, degenerate,
  time      - M doubled at fixed N, constant coefficient (time-dominated).
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .operators import assemble_stiffness
from .scenario import DiffusionLaw, Grid, l2_norm
from .solvers import solve_forward_linear

def corner_exponent(gamma: float) -> float:
    """Profile exponent s with s - 1 + gamma = 1.25, so the flux is x^{1.25}-like."""
    return 2.25 - gamma


def manufactured_profile(x: np.ndarray, gamma: float = 0.5) -> np.ndarray:
    """Spatial profile x^s (1-x) with s chosen so the flux stays regular."""
    return x ** corner_exponent(gamma) * (1.0 - x)


def manufactured_state(grid: Grid, gamma: float = 0.5) -> np.ndarray:
    return np.outer(np.cos(0.5 * grid.t), manufactured_profile(grid.x, gamma))


def manufactured_source(grid: Grid, gamma: float = 0.5) -> np.ndarray:
    """Closed-form source for u = x^s(1-x) cos(t/2) under u_t - (x^g u_x)_x."""
    s = corner_exponent(gamma)
    x = grid.x
    c1 = s * (s - 1.0 + gamma)
    c2 = (s + 1.0) * (s + gamma)
    with np.errstate(divide="ignore", invalid="ignore"):
        spatial = c1 * x ** (s - 2.0 + gamma) - c2 * x ** (s - 1.0 + gamma)
    spatial[~np.isfinite(spatial)] = 0.0
    src = (np.outer(-0.5 * np.sin(0.5 * grid.t), manufactured_profile(x, gamma))
           - np.outer(np.cos(0.5 * grid.t), spatial))
    src[:, 0] = src[:, -1] = 0.0
    return src


def _one_error(gamma: float, n: int, m: int, T: float) -> float:
    grid = Grid(n, m, T)
    law = DiffusionLaw(gamma=gamma)
    A = assemble_stiffness(grid, law)
    y0 = manufactured_state(grid, gamma)[0].copy()
    y0[0] = y0[-1] = 0.0
    y = solve_forward_linear(grid, A, 1.0, y0, manufactured_source(grid, gamma))
    return l2_norm(y[-1] - manufactured_state(grid, gamma)[-1], grid)


def _time_dominated_error(n: int, m: int, T: float) -> float:
    """Backward-Euler error on the slowest discrete mode, a == 1.

    The first eigenmode of the constant-coefficient stiffness operator is
    sin(pi x_j) exactly, so comparing against its semi-discrete decay
    exp(-lambda_1 T) isolates the time-integration error.
    """
    grid = Grid(n, m, T)
    law = DiffusionLaw(gamma=0.0)           # constant-coefficient fixture
    A = assemble_stiffness(grid, law)
    prof = np.sin(np.pi * grid.x)
    prof[0] = prof[-1] = 0.0
    lam1 = 4.0 * np.sin(np.pi * grid.h / 2.0) ** 2 / grid.h**2
    y = solve_forward_linear(grid, A, 1.0, prof,
                             np.zeros((m + 1, n + 2)))
    return l2_norm(y[-1] - np.exp(-lam1 * T) * prof, grid)


def run_convergence_study(mode: str = "combined", levels: int = 4,
                          gamma: float = 0.5) -> dict:
    """Error table with Richardson orders along the requested path."""
    if levels < 3:
        raise ConfigError("a convergence study needs at least 3 levels")
    rows = []
    if mode == "combined":
        n, m, T = 24, 50, 0.5
        for _ in range(levels):
            rows.append({"n_interior": n, "m_steps": m,
                         "error": _one_error(gamma, n, m, T)})
            n, m = 2 * n + 1, 2 * m
    elif mode == "spatial":
        n, m, T = 24, 400, 0.1
        for _ in range(levels):
            rows.append({"n_interior": n, "m_steps": m,
                         "error": _one_error(gamma, n, m, T)})
            n = 2 * n + 1
    elif mode == "time":
        n, m, T = 99, 25, 0.5
        for _ in range(levels):
            rows.append({"n_interior": n, "m_steps": m,
                         "error": _time_dominated_error(n, m, T)})
            m = 2 * m
    else:
        raise ConfigError(f"unknown study mode {mode!r}")

    errors = [r["error"] for r in rows]
    orders = [float(np.log2(errors[i - 1] / errors[i])) for i in range(1, levels)]
    for i, r in enumerate(rows):
        r["order"] = orders[i - 1] if i > 0 else None
    return {
        "mode": mode,
        "gamma": gamma,
        "levels": rows,
        "orders": orders,
        "monotone": bool(all(errors[i - 1] > errors[i] for i in range(1, levels))),
    }
