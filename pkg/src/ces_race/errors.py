"""Exception hierarchy shared across the package.

The command-line layer maps these to process exit codes: schema/input
problems exit 2, estimation failures exit 3, internal invariant breaches
exit 4.
"""
from __future__ import annotations


class CesRaceError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(CesRaceError):
    """Invalid input data or configuration (bad file, column, row, or value)."""


class EstimationError(CesRaceError):
    """An estimation step could not be completed (rank deficiency, too few clusters)."""


class InvariantError(CesRaceError):
    """An internal consistency check failed; indicates a bug or corrupted state."""
