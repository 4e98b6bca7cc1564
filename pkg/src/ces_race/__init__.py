"""ces-race: nested-CES factor demand systems.

Estimation, aggregation, and general-equilibrium analysis of technologies
that combine ICT capital, non-ICT capital, and four gender-by-skill labor
inputs through a four-level nested CES production function.
"""
from .errors import CesRaceError, EstimationError, InvariantError, SchemaError
from .factors import FACTOR_ORDER, FactorKey

__version__ = "0.1.0"

__all__ = [
    "CesRaceError",
    "SchemaError",
    "EstimationError",
    "InvariantError",
    "FactorKey",
    "FACTOR_ORDER",
    "__version__",
]
