"""Shift-share instruments for factor-quantity and nest-aggregate log-changes.

For a country and sector, the instrument predicting a factor's log-change
over a horizon is a share-weighted sum of leave-one-out industry growth
rates taken from the *opposite* sector:

* the weights are the country's own industry shares of the factor within the
  opposite sector, frozen at the first year the country observes that sector;
* each industry's growth is the log-change, over the horizon, of the factor
  quantity summed across all *other* countries.

The construction never touches the country's own quantities in the sector
being instrumented, which is what makes the result usable as an exogenous
shifter.  Instruments for the nested aggregates are built afterwards by
combining the factor instruments with the log-linearization weights.

Exclusions (a country-sector with no usable base-year shares, or a year
whose leave-one-out sum has no contributors) are logged on this module's
logger and simply omitted from the output.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

from .ces import GammaWeights
from .errors import SchemaError
from .factors import (
    AGGREGATE_TAGS,
    COMPOSITE_TARGETS,
    SECTORS,
    FactorKey,
    other_sector,
)
from .panel import Panel

__all__ = [
    "BartikSeries",
    "bartik",
    "bartik_ces_aggregates",
    "base_year_industry_shares",
    "write_bartik_csv",
]

logger = logging.getLogger(__name__)

# Everything an instrument row may predict: a single factor, a composite
# labor quantity, or a nest aggregate.
TargetLike = Union[FactorKey, str]


def _target_name(target: TargetLike) -> str:
    return target.name if isinstance(target, FactorKey) else str(target)


def _coerce_target(target: TargetLike) -> TargetLike:
    """Validate and normalize an instrument target."""
    if isinstance(target, FactorKey):
        return target
    if isinstance(target, str):
        if target in COMPOSITE_TARGETS or target in AGGREGATE_TAGS:
            return target
        try:
            return FactorKey[target]
        except KeyError:
            pass
    raise SchemaError(
        f"unknown instrument target {target!r}; expected a factor, one of "
        f"{tuple(COMPOSITE_TARGETS)}, or one of {AGGREGATE_TAGS}"
    )


def _target_quantity(obs, target: TargetLike) -> float:
    """The observation-level quantity whose growth the instrument predicts."""
    if isinstance(target, FactorKey):
        return obs.factor_quantity[target]
    total = 0.0
    for factor in COMPOSITE_TARGETS[target]:
        total += obs.factor_quantity[factor]
    return total


@dataclass(frozen=True)
class BartikSeries:
    """One instrument value.

    ``value`` is the predicted log-change of ``target`` for the
    ``(country, sector)`` cell over the construction horizon ending at
    ``year``.  Rows exist only for years at least one horizon after the
    first year of the country's run.
    """

    target: TargetLike
    country: str
    sector: str
    year: int
    value: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "target", _coerce_target(self.target))
        if self.sector not in SECTORS:
            raise SchemaError(f"unknown sector {self.sector!r}")
        object.__setattr__(self, "year", int(self.year))
        object.__setattr__(self, "value", float(self.value))
        if not math.isfinite(self.value):
            raise SchemaError("instrument value must be finite")

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.country, self.sector, self.year)


def base_year_industry_shares(
    panel: Panel, target: TargetLike, country: str, supply_sector: str
) -> tuple[int, dict[str, float]]:
    """Own-country industry shares of ``target`` within ``supply_sector``.

    The shares are frozen at the first year the country observes the sector
    and sum to one over the industries present that year.  Raises
    :class:`SchemaError` when the country never observes the sector, i.e.
    the share denominator is empty.
    """
    target = _coerce_target(target)
    if target in AGGREGATE_TAGS:
        raise SchemaError("industry shares are defined for factor targets only")
    years = sorted(
        {
            obs.year
            for obs in panel.observations
            if obs.country == country and obs.sector == supply_sector
        }
    )
    if not years:
        raise SchemaError(
            f"country {country!r} has no observations in sector "
            f"{supply_sector!r}: base-year industry shares are undefined"
        )
    base_year = years[0]
    cells = sorted(
        (obs.industry, _target_quantity(obs, target))
        for obs in panel.observations
        if obs.country == country
        and obs.sector == supply_sector
        and obs.year == base_year
    )
    denominator = 0.0
    for _industry, quantity in cells:
        denominator += quantity
    if denominator <= 0.0:
        raise SchemaError(
            f"base-year share denominator for country {country!r} in sector "
            f"{supply_sector!r} is zero"
        )
    return base_year, {industry: quantity / denominator for industry, quantity in cells}


def _leave_one_out_sum(
    contributors: Mapping[tuple[str, str, int], Sequence[tuple[str, float]]],
    sector: str,
    industry: str,
    year: int,
    excluded_country: str,
) -> float:
    total = 0.0
    for country, quantity in contributors.get((sector, industry, year), ()):
        if country != excluded_country:
            total += quantity
    return total


def bartik(panel: Panel, target: TargetLike, horizon: int) -> list[BartikSeries]:
    """Build shift-share instrument rows for ``target`` over ``horizon``.

    Returns one row per (country, sector, year) for which the construction
    is defined: the country-sector has base-year shares in the opposite
    sector, the country observes the sector at both ends of the horizon,
    and every share-weighted industry has a positive leave-one-out quantity
    at both ends.  Exclusions are logged, not raised.
    """
    target = _coerce_target(target)
    if target in AGGREGATE_TAGS:
        raise SchemaError(
            "aggregate instruments are built by bartik_ces_aggregates"
        )
    horizon = int(horizon)
    if horizon < 1:
        raise SchemaError("horizon must be a positive number of years")

    years_by_cell: dict[tuple[str, str], set[int]] = defaultdict(set)
    contributors: dict[tuple[str, str, int], list[tuple[str, float]]] = defaultdict(list)
    for obs in panel.observations:
        years_by_cell[(obs.country, obs.sector)].add(obs.year)
        contributors[(obs.sector, obs.industry, obs.year)].append(
            (obs.country, _target_quantity(obs, target))
        )
    # Panel observations are sorted with country as the leading key, so each
    # contributor list is already in country order; sorting keeps that
    # property explicit (summation order is part of the contract: left to
    # right over countries sorted by name).
    for rows in contributors.values():
        rows.sort()

    results: list[BartikSeries] = []
    for country, sector in sorted(years_by_cell):
        supply = other_sector(sector)
        try:
            _base_year, shares = base_year_industry_shares(
                panel, target, country, supply
            )
        except SchemaError:
            logger.warning(
                "instrument for country %r sector %r target %s excluded: "
                "no base-year industry shares in sector %r",
                country,
                sector,
                _target_name(target),
                supply,
            )
            continue
        own_years = years_by_cell[(country, sector)]
        for year in sorted(own_years):
            past = year - horizon
            if past not in own_years:
                continue
            value = 0.0
            defined = True
            for industry in sorted(shares):
                now_sum = _leave_one_out_sum(
                    contributors, supply, industry, year, country
                )
                past_sum = _leave_one_out_sum(
                    contributors, supply, industry, past, country
                )
                if now_sum <= 0.0 or past_sum <= 0.0:
                    logger.warning(
                        "instrument for country %r sector %r target %s "
                        "year %d excluded: leave-one-out sum for industry "
                        "%r is zero",
                        country,
                        sector,
                        _target_name(target),
                        year,
                        industry,
                    )
                    defined = False
                    break
                value += shares[industry] * (math.log(now_sum) - math.log(past_sum))
            if defined:
                results.append(
                    BartikSeries(
                        target=target,
                        country=country,
                        sector=sector,
                        year=year,
                        value=value,
                    )
                )
    return results


def bartik_ces_aggregates(
    panel: Panel,
    bartiks: Mapping[FactorKey, Iterable[BartikSeries]],
    gammas: GammaWeights,
) -> dict[str, list[BartikSeries]]:
    """Combine factor instruments into instruments for the nest aggregates.

    For every (country, sector, year) cell where the needed constituents
    exist::

        D = (1 - gamma_fh) * Ki + gamma_fh * Lfh
        C = (1 - gamma_mh) * D  + gamma_mh * Lmh
        B = (1 - gamma_fu) * C  + gamma_fu * Lfu

    A cell missing a constituent is skipped for that aggregate and for every
    aggregate built on top of it.  ``panel`` is used to validate that the
    instrument rows belong to it; the values derive from the rows alone.
    """
    known = {(obs.country, obs.sector) for obs in panel.observations}
    values: dict[FactorKey, dict[tuple[str, str, int], float]] = {}
    for factor in (FactorKey.Ki, FactorKey.Lfh, FactorKey.Lmh, FactorKey.Lfu):
        rows = bartiks.get(factor)
        if rows is None:
            raise SchemaError(
                f"aggregate instruments need rows for {factor.name}; none given"
            )
        per_cell: dict[tuple[str, str, int], float] = {}
        for row in rows:
            if (row.country, row.sector) not in known:
                raise SchemaError(
                    f"instrument row for {(row.country, row.sector)} does not "
                    "belong to the panel"
                )
            per_cell[row.key] = row.value
        values[factor] = per_cell

    def combine(
        weight: float,
        base: Mapping[tuple[str, str, int], float],
        factor: FactorKey,
    ) -> dict[tuple[str, str, int], float]:
        factor_rows = values[factor]
        return {
            key: (1.0 - weight) * base[key] + weight * factor_rows[key]
            for key in base
            if key in factor_rows
        }

    d_vals = combine(gammas.gamma_fh, values[FactorKey.Ki], FactorKey.Lfh)
    c_vals = combine(gammas.gamma_mh, d_vals, FactorKey.Lmh)
    b_vals = combine(gammas.gamma_fu, c_vals, FactorKey.Lfu)

    out: dict[str, list[BartikSeries]] = {}
    for tag, cell_values in (("D", d_vals), ("C", c_vals), ("B", b_vals)):
        out[tag] = [
            BartikSeries(
                target=tag, country=key[0], sector=key[1], year=key[2], value=value
            )
            for key, value in sorted(cell_values.items())
        ]
    return out


def write_bartik_csv(rows: Iterable[BartikSeries], path) -> None:
    """Dump instrument rows as ``target,country,sector,year,value``."""
    ordered = sorted(
        rows, key=lambda row: (_target_name(row.target), row.country, row.sector, row.year)
    )
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["target", "country", "sector", "year", "value"])
        for row in ordered:
            writer.writerow(
                [_target_name(row.target), row.country, row.sector, row.year, repr(row.value)]
            )
