"""Factor identities, orderings, and sector tags shared across the package.

The six production factors are enumerated by :class:`FactorKey`.  Their
integer values fix the canonical ordering used for every array-valued
quantity in the package: position 0 is the innermost factor of the nested
technology and position 5 the outermost.
"""
from __future__ import annotations

from enum import IntEnum


class FactorKey(IntEnum):
    """The six production factors, ordered by nesting depth (innermost first).

    Ki   ICT capital
    Lfh  female skilled labor
    Lmh  male skilled labor
    Lfu  female unskilled labor
    Lmu  male unskilled labor
    Ko   non-ICT capital (enters the outermost, Cobb-Douglas, layer)
    """

    Ki = 0
    Lfh = 1
    Lmh = 2
    Lfu = 3
    Lmu = 4
    Ko = 5


FACTOR_ORDER: tuple[FactorKey, ...] = tuple(FactorKey)
FACTOR_NAMES: tuple[str, ...] = tuple(f.name for f in FACTOR_ORDER)

LABOR_FACTORS: tuple[FactorKey, ...] = (
    FactorKey.Lfh,
    FactorKey.Lmh,
    FactorKey.Lfu,
    FactorKey.Lmu,
)
CAPITAL_FACTORS: tuple[FactorKey, ...] = (FactorKey.Ki, FactorKey.Ko)
SKILLED_FACTORS: tuple[FactorKey, ...] = (FactorKey.Lfh, FactorKey.Lmh)
UNSKILLED_FACTORS: tuple[FactorKey, ...] = (FactorKey.Lfu, FactorKey.Lmu)
MALE_FACTORS: tuple[FactorKey, ...] = (FactorKey.Lmh, FactorKey.Lmu)
FEMALE_FACTORS: tuple[FactorKey, ...] = (FactorKey.Lfh, FactorKey.Lfu)

# Nests of the four-level technology, innermost first.  Each tag names the
# labor factor that the nest introduces alongside the previously built bundle.
NEST_ORDER: tuple[str, ...] = ("fh", "mh", "fu", "mu")
NEST_FACTOR: dict[str, FactorKey] = {
    "fh": FactorKey.Lfh,
    "mh": FactorKey.Lmh,
    "fu": FactorKey.Lfu,
    "mu": FactorKey.Lmu,
}

# Tag used in the flat CSV format for rows carrying sector output data
# (quantity = real output, price = output deflator).
OUTPUT_TAG = "Output"

GOODS = "goods"
SERVICE = "service"
SECTORS: tuple[str, str] = (GOODS, SERVICE)

AGE_GROUPS: tuple[str, ...] = ("young", "middle", "old")
EDU_GROUPS: tuple[str, ...] = ("high", "medium", "low")

# CES-aggregate tags used by the instrument builder and its CSV dump.
AGGREGATE_TAGS: tuple[str, ...] = ("B", "C", "D")

# Composite labor targets accepted by the instrument builder: total male,
# female, skilled, and unskilled labor.
COMPOSITE_TARGETS: dict[str, tuple[FactorKey, ...]] = {
    "Lm": MALE_FACTORS,
    "Lf": FEMALE_FACTORS,
    "Lh": SKILLED_FACTORS,
    "Lu": UNSKILLED_FACTORS,
}


def other_sector(sector: str) -> str:
    """Return the opposite member of the two-sector economy."""
    if sector == GOODS:
        return SERVICE
    if sector == SERVICE:
        return GOODS
    raise ValueError(f"unknown sector {sector!r}; expected one of {SECTORS}")


def parse_factor(name: str) -> FactorKey:
    """Parse a factor tag as it appears in CSV files."""
    try:
        return FactorKey[name]
    except KeyError:
        raise ValueError(
            f"unknown factor {name!r}; expected one of {FACTOR_NAMES}"
        ) from None
