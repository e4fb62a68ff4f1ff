"""Problem data for hierarchical control of a degenerate nonlocal heat equation.

The state equation on Q = (0,1) x (0,T) is

    y_t - (a(x) l(I[y]) y_x)_x = h 1_O + v1 1_{O1} + v2 1_{O2},
    y(0,t) = y(1,t) = 0,  y(x,0) = y0(x),      I[y](t) = int_0^1 y(x,t) dx,

with a(x) = x^gamma weakly degenerate at x = 0 (0 < gamma < 1) and l a C^2
scalar law with l(0) > 0 and bounded derivative.  A leader control h acts on
the open interval O; two follower controls act on O1, O2 and share the
observation interval Od.

This module holds the passive data: grid, coefficient laws, control regions,
initial/target profiles, and the scenario loader with its JSON schema.  All
discrete quadratures used across the package are fixed here:

* spatial integrals are trapezoid sums over the full node set,
* interval regions become trapezoid-style node weights (1 inside, 1/2 on a
  node that lands exactly on an endpoint, 0 outside); the same weights mask
  PDE sources and region integrals so discrete duality identities are exact,
* time integrals of solver fields use the rectangle rule over levels 1..M.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvariantViolation

# Nodes are considered to lie exactly on a region endpoint within this slack.
_SNAP = 1e-12


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on [0,1] x [0,T].

    n_interior spatial unknowns at x_j = j*h, h = 1/(n_interior+1), plus the
    two Dirichlet boundary nodes; m_steps backward-Euler steps of size T/m.
    """

    n_interior: int
    m_steps: int
    T: float

    def __post_init__(self):
        if self.n_interior < 1:
            raise ConfigError("n_interior must be >= 1")
        if self.m_steps < 2:
            raise ConfigError("m_steps must be >= 2")
        if not (self.T > 0.0):
            raise ConfigError("T must be positive")

    @property
    def h(self) -> float:
        return 1.0 / (self.n_interior + 1)

    @property
    def dt(self) -> float:
        return self.T / self.m_steps

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_interior + 2)

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.m_steps + 1)

    @property
    def x_half(self) -> np.ndarray:
        """Half-point abscissae x_{j+1/2}, one per interval, never 0."""
        x = self.x
        return 0.5 * (x[:-1] + x[1:])

    @property
    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n_interior + 2, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    def refined(self) -> "Grid":
        """Halve h and dt; coarse nodes are a subset of the fine ones."""
        return Grid(2 * self.n_interior + 1, 2 * self.m_steps, self.T)


# ---------------------------------------------------------------------------
# coefficient laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionLaw:
    """Power-law diffusion a(x) = x^gamma.

    gamma = 0 gives the constant-coefficient fixture a = 1 used by operator
    tests; it fails validate() because a(0) must vanish for a scenario.
    The weak-degeneracy constant K in x a'(x) <= K a(x) equals gamma.
    """

    gamma: float

    def a(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.gamma == 0.0:
            return np.ones_like(x)
        return np.power(x, self.gamma)

    def da(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.gamma == 0.0:
            return np.zeros_like(x)
        return self.gamma * np.power(x, self.gamma - 1.0)

    @property
    def degeneracy_constant(self) -> float:
        return self.gamma

    def validate(self) -> None:
        if not (0.0 < self.gamma < 1.0):
            raise ConfigError(
                f"gamma={self.gamma} outside (0,1): a(0)=0 with K=gamma<1 "
                "requires a strictly weakly degenerate power law"
            )

    def check_degeneracy(self, n_samples: int = 1000) -> float:
        """Max of x a'(x)/a(x) over a positive sample; equals gamma exactly."""
        xs = np.linspace(1.0 / n_samples, 1.0, n_samples)
        ratio = xs * self.da(xs) / self.a(xs)
        k = float(np.max(ratio))
        if k >= 1.0:
            raise InvariantViolation(f"degeneracy constant {k} >= 1")
        return k


_ELL_FAMILIES = ("constant", "atan", "logistic")


@dataclass(frozen=True)
class NonlocalLaw:
    """Scalar law l applied to the state integral.

    Families:
      constant  l(s) = c0
      atan      l(s) = c0 + c1*atan(s)
      logistic  l(s) = c0 + c1/(1+exp(-s))
    Each is C^2 with globally bounded first derivative.
    """

    family: str
    c0: float = 1.0
    c1: float = 0.0

    def __post_init__(self):
        if self.family not in _ELL_FAMILIES:
            raise ConfigError(f"unknown nonlocal-law family {self.family!r}")

    def ell(self, s):
        s = np.asarray(s, dtype=float)
        if self.family == "constant":
            return np.full_like(s, self.c0)
        if self.family == "atan":
            return self.c0 + self.c1 * np.arctan(s)
        sig = 1.0 / (1.0 + np.exp(-s))
        return self.c0 + self.c1 * sig

    def dell(self, s):
        s = np.asarray(s, dtype=float)
        if self.family == "constant":
            return np.zeros_like(s)
        if self.family == "atan":
            # s*s may overflow for saturated arguments; the limit 0 is exact.
            with np.errstate(over="ignore"):
                return self.c1 / (1.0 + s * s)
        sig = 1.0 / (1.0 + np.exp(-s))
        return self.c1 * sig * (1.0 - sig)

    def d2ell(self, s):
        s = np.asarray(s, dtype=float)
        if self.family == "constant":
            return np.zeros_like(s)
        if self.family == "atan":
            with np.errstate(over="ignore"):
                return -2.0 * self.c1 * s / (1.0 + s * s) ** 2
        sig = 1.0 / (1.0 + np.exp(-s))
        return self.c1 * sig * (1.0 - sig) * (1.0 - 2.0 * sig)

    @property
    def ell0(self) -> float:
        return float(self.ell(0.0))

    @property
    def lipschitz_bound(self) -> float:
        """sup |l'|, attained at s=0 (atan) resp. s=0 (logistic: c1/4)."""
        if self.family == "constant":
            return 0.0
        if self.family == "atan":
            return abs(self.c1)
        return abs(self.c1) / 4.0

    def validate(self) -> None:
        if not (self.ell0 > 0.0):
            raise ConfigError(f"l(0) = {self.ell0} must be positive")


# ---------------------------------------------------------------------------
# regions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Region:
    """Open interval (a,b) in (0,1) realized as nodal quadrature weights."""

    a: float
    b: float

    def __post_init__(self):
        if not (0.0 <= self.a < self.b <= 1.0):
            raise ConfigError(f"region ({self.a},{self.b}) not a sub-interval of (0,1)")

    @property
    def measure(self) -> float:
        return self.b - self.a

    def weights(self, grid: Grid) -> np.ndarray:
        """Trapezoid indicator: 1 inside, 1/2 exactly on an endpoint, 0 outside."""
        x = grid.x
        w = np.zeros_like(x)
        inside = (x > self.a + _SNAP) & (x < self.b - _SNAP)
        w[inside] = 1.0
        w[np.abs(x - self.a) <= _SNAP] = 0.5
        w[np.abs(x - self.b) <= _SNAP] = 0.5
        return w

    def support(self, grid: Grid) -> np.ndarray:
        return self.weights(grid) > 0.0

    def overlaps(self, other: "Region") -> bool:
        return max(self.a, other.a) < min(self.b, other.b)


# ---------------------------------------------------------------------------
# space-time fields
# ---------------------------------------------------------------------------


@dataclass
class SpaceTimeField:
    """Nodal values u[n, j] at (t_n, x_j), n = 0..M, j = 0..N+1."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expect = (self.grid.m_steps + 1, self.grid.n_interior + 2)
        if self.values.shape != expect:
            raise InvariantViolation(
                f"field shape {self.values.shape} does not match grid {expect}"
            )

    @classmethod
    def zeros(cls, grid: Grid) -> "SpaceTimeField":
        return cls(np.zeros((grid.m_steps + 1, grid.n_interior + 2)), grid)

    def check_dirichlet(self, tol: float = 0.0) -> None:
        worst = max(float(np.max(np.abs(self.values[:, 0]))),
                    float(np.max(np.abs(self.values[:, -1]))))
        if worst > tol:
            raise InvariantViolation(f"Dirichlet columns not zero (max {worst:.3e})")

    def l2q_norm(self) -> float:
        """L2(Q) norm: rectangle in t over levels 1..M, trapezoid in x."""
        wx = self.grid.trapezoid_weights
        per_level = (self.values[1:] ** 2) @ wx
        return math.sqrt(float(np.sum(per_level) * self.grid.dt))


def l1_integral(u: np.ndarray, grid: Grid) -> float:
    """Trapezoid integral of a nodal profile over [0,1]."""
    u = np.asarray(u, dtype=float)
    return float(u @ grid.trapezoid_weights)


def l2_norm(u: np.ndarray, grid: Grid) -> float:
    u = np.asarray(u, dtype=float)
    return math.sqrt(float((u * u) @ grid.trapezoid_weights))


def h1a_seminorm(u: np.ndarray, grid: Grid, law: DiffusionLaw) -> float:
    """Weighted seminorm ||sqrt(a) u_x||: midpoint a, forward differences."""
    u = np.asarray(u, dtype=float)
    du = np.diff(u) / grid.h
    a_mid = law.a(grid.x_half)
    return math.sqrt(float(np.sum(a_mid * du * du) * grid.h))


def weighted_l2(field: np.ndarray, time_weights: np.ndarray, grid: Grid) -> float:
    """Space-time norm with a per-level multiplier: sum_n dt w_n ||u^n||^2.

    Levels 1..M, matching l2q_norm.  time_weights has length M+1; entry 0 is
    ignored by the rectangle rule.
    """
    field = np.asarray(field, dtype=float)
    w = np.asarray(time_weights, dtype=float)
    wx = grid.trapezoid_weights
    per_level = (field[1:] ** 2) @ wx
    return math.sqrt(float(np.sum(w[1:] * per_level) * grid.dt))


# ---------------------------------------------------------------------------
# initial / target profiles
# ---------------------------------------------------------------------------


def _profile(family: str, params: dict, grid: Grid) -> np.ndarray:
    x = grid.x
    if family == "zero":
        return np.zeros_like(x)
    if family == "sine":
        amp = float(params.get("amp", 1.0))
        mode = int(params.get("mode", 1))
        u = amp * np.sin(mode * np.pi * x)
    elif family == "bump":
        amp = float(params.get("amp", 1.0))
        u = amp * x * (1.0 - x)
    else:
        raise ConfigError(f"unknown profile family {family!r}")
    u[0] = u[-1] = 0.0  # pin Dirichlet nodes against roundoff in sin(k*pi)
    return u


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------

#: Solver knobs resolved into every scenario; overridable from the JSON file.
_SOLVER_DEFAULTS = {
    "picard_tol": 1e-11,
    "picard_max_iter": 50,
    "fixed_point_damping": 0.7,
    "fixed_point_tol": 1e-9,
    "fixed_point_max_iter": 200,
    "cg_tol": 1e-12,
    "cg_max_iter": 200000,
    "null_tol": 1e-6,
    "liusternik_tol": 1e-8,
    "liusternik_max_iter": 12,
    "seed": 42,
}


@dataclass
class Scenario:
    """Fully resolved problem instance."""

    grid: Grid
    a_law: DiffusionLaw
    ell: NonlocalLaw
    region_O: Region
    region_O1: Region
    region_O2: Region
    region_Od: Region
    alpha: tuple[float, float]
    mu: tuple[float, float]
    y0: np.ndarray
    targets: tuple[np.ndarray, np.ndarray]
    carleman: dict
    solver: dict = field(default_factory=lambda: dict(_SOLVER_DEFAULTS))
    radial_dim: int | None = None
    raw_config: dict = field(default_factory=dict)

    def validate(self) -> None:
        self.a_law.validate()
        self.ell.validate()
        self.a_law.check_degeneracy()
        if not self.region_O.overlaps(self.region_Od):
            raise ConfigError("observation region Od must intersect the leader region O")
        if not (self.alpha[0] >= 0.0 and self.alpha[1] >= 0.0):
            raise ConfigError("tracking weights alpha must be nonnegative")
        if not (self.mu[0] > 0.0 and self.mu[1] > 0.0):
            raise ConfigError("penalty weights mu must be positive")
        ap, bp = self.carleman["alpha_prime"], self.carleman["beta_prime"]
        if not (self.region_O.a < ap < bp < self.region_O.b):
            raise ConfigError(
                f"carleman interval ({ap},{bp}) must be strictly inside O="
                f"({self.region_O.a},{self.region_O.b})"
            )
        m0_min = (self.grid.T / 2.0) ** 4 * self.grid.T**4
        if self.carleman["m0"] < m0_min * (1.0 - 1e-12):
            raise ConfigError(
                f"carleman m0={self.carleman['m0']} below (T/2)^4 T^4 = {m0_min}"
            )
        if self.carleman["s"] <= 0.0:
            raise ConfigError("carleman s must be positive")
        if self.radial_dim is not None and self.radial_dim < 1:
            raise ConfigError("radial_dim must be >= 1")
        if np.max(np.abs(self.y0[[0, -1]])) > 0.0:
            raise ConfigError("y0 must satisfy the Dirichlet conditions")

    # -- derived data used everywhere -------------------------------------

    def region_weights(self) -> dict[str, np.ndarray]:
        g = self.grid
        return {
            "O": self.region_O.weights(g),
            "O1": self.region_O1.weights(g),
            "O2": self.region_O2.weights(g),
            "Od": self.region_Od.weights(g),
        }

    def target_fields(self) -> tuple[np.ndarray, np.ndarray]:
        return self.targets

    def with_overrides(self, **kw) -> "Scenario":
        """Shallow functional update used by parameter sweeps in tests/CLI."""
        import copy

        out = copy.deepcopy(self)
        for key, val in kw.items():
            if key in ("alpha", "mu"):
                setattr(out, key, tuple(float(v) for v in val))
            elif key == "grid":
                out.grid = val
            elif key in out.carleman:
                out.carleman[key] = val
            elif key in out.solver:
                out.solver[key] = val
            else:
                raise KeyError(key)
        return out

    def resolved_config(self) -> dict:
        """Canonical dict with every default made explicit (report embedding)."""
        cfg = dict(self.raw_config)
        cfg["T"] = self.grid.T
        cfg["n_interior"] = self.grid.n_interior
        cfg["m_steps"] = self.grid.m_steps
        cfg["gamma"] = self.a_law.gamma
        cfg["ell"] = {"family": self.ell.family,
                      "params": {"c0": self.ell.c0, "c1": self.ell.c1}}
        cfg["regions"] = {
            "O": [self.region_O.a, self.region_O.b],
            "O1": [self.region_O1.a, self.region_O1.b],
            "O2": [self.region_O2.a, self.region_O2.b],
            "Od": [self.region_Od.a, self.region_Od.b],
        }
        cfg["alpha"] = list(self.alpha)
        cfg["mu"] = list(self.mu)
        cfg["carleman"] = dict(self.carleman)
        cfg["solver"] = dict(self.solver)
        if self.radial_dim is not None:
            cfg["radial_dim"] = self.radial_dim
        return cfg


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"scenario missing required key {key!r}")
    return cfg[key]


def load_scenario(source: str | Path | dict) -> Scenario:
    """Build and validate a Scenario from a JSON file or an equivalent dict."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"scenario file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario file is not valid JSON: {exc}") from exc
    else:
        cfg = dict(source)

    if not isinstance(cfg, dict):
        raise ConfigError("scenario must be a JSON object")

    grid = Grid(int(_require(cfg, "n_interior")), int(_require(cfg, "m_steps")),
                float(_require(cfg, "T")))
    a_law = DiffusionLaw(float(_require(cfg, "gamma")))

    ell_cfg = _require(cfg, "ell")
    params = ell_cfg.get("params", {})
    ell = NonlocalLaw(ell_cfg.get("family", "constant"),
                      c0=float(params.get("c0", 1.0)),
                      c1=float(params.get("c1", 0.0)))

    regions_cfg = _require(cfg, "regions")
    regions = {}
    for name in ("O", "O1", "O2", "Od"):
        pair = _require(regions_cfg, name)
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
            raise ConfigError(f"region {name} must be a [a, b] pair")
        regions[name] = Region(float(pair[0]), float(pair[1]))

    alpha = tuple(float(v) for v in cfg.get("alpha", [1.0, 1.0]))
    mu = tuple(float(v) for v in cfg.get("mu", [1.0, 1.0]))
    if len(alpha) != 2 or len(mu) != 2:
        raise ConfigError("alpha and mu must each have two entries")

    y0_cfg = cfg.get("y0", {"family": "zero", "params": {}})
    y0 = _profile(y0_cfg.get("family", "zero"), y0_cfg.get("params", {}), grid)

    t_cfg = cfg.get("targets", {"family": "zero", "params": {}})
    fam = t_cfg.get("family", "zero")
    t_params = t_cfg.get("params", {})
    amps = t_params.get("amp", [0.0, 0.0])
    if np.isscalar(amps):
        amps = [amps, amps]
    targets = []
    for amp in amps:
        prof = _profile(fam, {**t_params, "amp": amp}, grid)
        targets.append(np.tile(prof, (grid.m_steps + 1, 1)))
    targets = (targets[0], targets[1])

    car_cfg = dict(cfg.get("carleman", {}))
    oa, ob = regions["O"].a, regions["O"].b
    quarter = 0.25 * (ob - oa)
    carleman = {
        "s": float(car_cfg.get("s", 1.0)),
        "lambda": car_cfg.get("lambda", None),
        "alpha_prime": float(car_cfg.get("alpha_prime", oa + quarter)),
        "beta_prime": float(car_cfg.get("beta_prime", ob - quarter)),
        "m0": float(car_cfg.get("m0", (grid.T / 2.0) ** 4 * grid.T**4)),
    }
    if carleman["lambda"] is not None:
        carleman["lambda"] = float(carleman["lambda"])

    solver = dict(_SOLVER_DEFAULTS)
    for key, val in cfg.get("solver", {}).items():
        if key not in solver:
            raise ConfigError(f"unknown solver option {key!r}")
        solver[key] = type(solver[key])(val)

    radial_dim = cfg.get("radial_dim")
    if radial_dim is not None:
        radial_dim = int(radial_dim)

    scen = Scenario(
        grid=grid, a_law=a_law, ell=ell,
        region_O=regions["O"], region_O1=regions["O1"],
        region_O2=regions["O2"], region_Od=regions["Od"],
        alpha=alpha, mu=mu, y0=y0, targets=targets,
        carleman=carleman, solver=solver, radial_dim=radial_dim,
        raw_config=cfg,
    )
    scen.validate()
    return scen
