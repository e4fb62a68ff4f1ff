"""Exception types shared across the package.

The CLI maps these onto process exit codes, so solver code should raise the
most specific one that applies rather than a bare ValueError.
"""

from __future__ import annotations


class ConfigError(Exception):
    """Scenario file or command-line configuration is malformed."""


class InvariantViolation(Exception):
    """A structural property the construction guarantees failed to hold."""


class ConvergenceFailure(Exception):
    """An iterative solver exhausted its budget or diverged.

    Carries a diagnostics dict (residual histories, iteration counts) so
    callers can report the failure instead of silently truncating.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
