"""Machine-readable run reports: canonical JSON, hashing, CSV emission.

Reports must be bit-identical across repeated runs with the same seed and
config, except for wall-clock timings.  That drives three conventions here:
every float is serialized by its shortest round-trip representation (the
json module's default), dict keys are emitted sorted, and timings live in
one top-level "timings" object that consumers drop before comparing.  The
scenario hash covers the fully resolved config (defaults included), so two
reports with equal hashes describe the same computation.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .scenario import Grid, Scenario

#: Schema version stamped into every report.
REPORT_VERSION = 1


def _sanitize(obj):
    """Recursively convert numpy containers/scalars into JSON-able values."""
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_sanitize(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if not np.isfinite(v):
            # JSON has no Infinity/NaN literals; keep the value readable.
            return repr(v)
        return v
    return obj


def canonical_json(obj) -> str:
    """Sorted-key, compact, NaN-free serialization used for files and hashes."""
    return json.dumps(_sanitize(obj), sort_keys=True,
                      separators=(",", ":"), allow_nan=False)


def scenario_hash(scen: Scenario) -> str:
    """sha256 of the resolved config; equal hashes = same computation."""
    return hashlib.sha256(
        canonical_json(scen.resolved_config()).encode()).hexdigest()


def build_report(command: str, scen: Scenario, outcomes: dict,
                 checks: dict[str, bool], timings: dict[str, float]) -> dict:
    return {
        "report_version": REPORT_VERSION,
        "command": command,
        "seed": int(scen.solver["seed"]),
        "scenario_hash": scenario_hash(scen),
        "config": scen.resolved_config(),
        "outcomes": outcomes,
        "checks": {k: bool(v) for k, v in checks.items()},
        "passed": bool(all(checks.values())),
        "timings": timings,
    }


def report_without_timings(report: dict) -> dict:
    """The determinism contract covers everything but this one key."""
    out = dict(report)
    out.pop("timings", None)
    return out


def write_report(report: dict, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(canonical_json(report) + "\n")
    return path


def write_field_csv(out_dir: str | Path, name: str, field: np.ndarray,
                    grid: Grid) -> Path:
    """Space-time field in long format (t, x, value), row-major in time."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "x", name])
        for k, t in enumerate(grid.t):
            for j, x in enumerate(grid.x):
                writer.writerow([repr(float(t)), repr(float(x)),
                                 repr(float(field[k, j]))])
    return path


def write_table_csv(out_dir: str | Path, name: str, header: list[str],
                    rows: list[list]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                             else v for v in row])
    return path
