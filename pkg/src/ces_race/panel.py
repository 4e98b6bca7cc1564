"""Panel ingestion, composition adjustment, and rental prices of capital.

The canonical pipeline is::

    panel = load_panel("panel.csv", groups_path="groups.csv", base_year=1980)
    panel = adjust_composition(panel)
    panel = rental_price_internal(panel, depreciation)   # or _external
    panel = deflate_panel(panel)

Rental prices are computed from *nominal* investment prices and nominal
capital income, so the rental ops must run before :func:`deflate_panel`
divides the monetary columns by the output deflator.

CSV formats (UTF-8, header row, decimal point):

``panel.csv``: ``country,sector,industry,year,factor,quantity,price,investment_price``
    One row per factor per (country, sector, industry, year) cell, with
    ``factor`` one of Ki, Lfh, Lmh, Lfu, Lmu, Ko — plus one pseudo-factor row
    ``Output`` per cell in which ``quantity`` holds real output, ``price``
    the nominal output price (so value = quantity x price), and
    ``investment_price`` the output deflator (empty means 1.0).
    ``investment_price`` is required on the Ki and Ko rows and ignored on
    labor rows.

``groups.csv``: ``country,sector,industry,year,factor,age_group,edu_group,hours,wage``
    Age-by-education detail for the four labor factors.

``cpi.csv``: ``country,year,cpi``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

from .errors import SchemaError
from .factors import (
    AGE_GROUPS,
    CAPITAL_FACTORS,
    EDU_GROUPS,
    FACTOR_ORDER,
    LABOR_FACTORS,
    OUTPUT_TAG,
    SECTORS,
    SKILLED_FACTORS,
    FactorKey,
    parse_factor,
)

logger = logging.getLogger("ces_race.panel")

# Base groups of the efficiency-unit normalization: prime-age workers of the
# factor's own education segment.
BASE_GROUP = {
    FactorKey.Lmh: ("middle", "high"),
    FactorKey.Lfh: ("middle", "high"),
    FactorKey.Lmu: ("middle", "medium"),
    FactorKey.Lfu: ("middle", "medium"),
}

# Observations carrying any of these flags have no usable rental price and
# are excluded from estimation samples that need one.
NO_RENTAL_FLAG = "no-rental-price"
NO_CPI_FLAG = "no-cpi-window"
RENTAL_EXCLUSION_FLAGS = frozenset({NO_RENTAL_FLAG, NO_CPI_FLAG})


@dataclass(frozen=True)
class GroupCell:
    """Hours and wage of one age-by-education worker group."""

    age_group: str
    edu_group: str
    hours: float
    wage: float

    def __post_init__(self) -> None:
        if self.age_group not in AGE_GROUPS:
            raise SchemaError(f"unknown age group {self.age_group!r}")
        if self.edu_group not in EDU_GROUPS:
            raise SchemaError(f"unknown education group {self.edu_group!r}")
        if not (self.hours >= 0.0):
            raise SchemaError(f"hours must be non-negative, got {self.hours}")
        if self.hours > 0.0 and not (self.wage > 0.0):
            raise SchemaError(f"wage must be positive when hours are positive, got {self.wage}")
        if not (self.wage >= 0.0):
            raise SchemaError(f"wage must be non-negative, got {self.wage}")


_ALLOWED_EDU = {f: ("high",) for f in SKILLED_FACTORS}
_ALLOWED_EDU.update({f: ("medium", "low") for f in LABOR_FACTORS if f not in SKILLED_FACTORS})


@dataclass(frozen=True)
class PanelObservation:
    """One (country, sector, industry, year) cell of the panel."""

    country: str
    sector: str
    industry: str
    year: int
    factor_quantity: Mapping[FactorKey, float]
    factor_price: Mapping[FactorKey, float]
    investment_price: Mapping[FactorKey, float]
    output_value: float
    output_deflator: float
    group_detail: Mapping[FactorKey, tuple[GroupCell, ...]] = field(default_factory=dict)
    flags: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.sector not in SECTORS:
            raise SchemaError(f"{self._where()}: unknown sector {self.sector!r}")
        for name, mapping in (
            ("quantity", self.factor_quantity),
            ("price", self.factor_price),
        ):
            for f in FACTOR_ORDER:
                value = mapping.get(f)
                if value is None:
                    raise SchemaError(f"{self._where()}: missing {name} for factor {f.name}")
                if not (value > 0.0):
                    raise SchemaError(
                        f"{self._where()}: non-positive {name} {value} for factor {f.name}"
                    )
        for f in CAPITAL_FACTORS:
            value = self.investment_price.get(f)
            if value is None:
                raise SchemaError(f"{self._where()}: missing investment price for {f.name}")
            if not (value > 0.0):
                raise SchemaError(f"{self._where()}: non-positive investment price for {f.name}")
        if not (self.output_value > 0.0):
            raise SchemaError(f"{self._where()}: non-positive output value")
        if not (self.output_deflator > 0.0):
            raise SchemaError(f"{self._where()}: non-positive output deflator")
        for f, cells in self.group_detail.items():
            allowed = _ALLOWED_EDU.get(f)
            if allowed is None:
                raise SchemaError(f"{self._where()}: group detail attached to non-labor {f.name}")
            for cell in cells:
                if cell.edu_group not in allowed:
                    raise SchemaError(
                        f"{self._where()}: education group {cell.edu_group!r} not valid "
                        f"for factor {f.name} (allowed: {allowed})"
                    )

    def _where(self) -> str:
        return f"{self.country}/{self.sector}/{self.industry}/{self.year}"

    @property
    def key(self) -> tuple[str, str, str, int]:
        return (self.country, self.sector, self.industry, self.year)

    def wage_bill(self, factor: FactorKey) -> float:
        return self.factor_price[factor] * self.factor_quantity[factor]

    def labor_compensation(self) -> float:
        return sum(self.wage_bill(f) for f in LABOR_FACTORS)


@dataclass(frozen=True)
class Panel:
    """A validated panel of observations.

    ``markup`` disables the zero-profit consistency check (used after
    composition adjustment, which redistributes measured wage bills).
    ``zero_profit_tol``, when set and ``markup`` is off, requires
    ``sum_f price*quantity == output_value`` to that relative tolerance.
    """

    observations: tuple[PanelObservation, ...]
    base_year: int
    markup: bool = False
    zero_profit_tol: float | None = None
    diagnostics: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        ordered = tuple(sorted(self.observations, key=lambda o: o.key))
        object.__setattr__(self, "observations", ordered)
        object.__setattr__(self, "diagnostics", tuple(self.diagnostics))
        seen: set[tuple[str, str, str, int]] = set()
        for obs in ordered:
            if obs.key in seen:
                raise SchemaError(f"duplicate observation key {obs.key}")
            seen.add(obs.key)
        for run_key, run in self.runs().items():
            years = [o.year for o in run]
            if years != list(range(years[0], years[0] + len(years))):
                raise SchemaError(
                    f"years for {run_key} are not a contiguous run: {years}"
                )
        if not self.markup and self.zero_profit_tol is not None:
            for obs in ordered:
                total = sum(obs.wage_bill(f) for f in FACTOR_ORDER)
                if abs(total - obs.output_value) > self.zero_profit_tol * obs.output_value:
                    raise SchemaError(
                        f"{obs._where()}: factor payments {total} differ from output "
                        f"value {obs.output_value} beyond tolerance {self.zero_profit_tol}"
                    )

    def runs(self) -> dict[tuple[str, str, str], tuple[PanelObservation, ...]]:
        """Observations grouped by (country, sector, industry), year-ordered."""
        grouped: dict[tuple[str, str, str], list[PanelObservation]] = {}
        for obs in self.observations:
            grouped.setdefault((obs.country, obs.sector, obs.industry), []).append(obs)
        return {k: tuple(v) for k, v in grouped.items()}

    def countries(self) -> tuple[str, ...]:
        return tuple(sorted({obs.country for obs in self.observations}))

    def with_observations(
        self, observations: Iterable[PanelObservation], extra_diagnostics: Iterable[str] = ()
    ) -> "Panel":
        return replace(
            self,
            observations=tuple(observations),
            diagnostics=self.diagnostics + tuple(extra_diagnostics),
        )


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _parse_positive(row_no: int, column: str, raw: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise SchemaError(f"row {row_no}: cannot parse {column}={raw!r}") from None
    return value


def load_panel(
    path,
    base_year: int,
    groups_path=None,
    markup: bool = False,
    zero_profit_tol: float | None = None,
) -> Panel:
    """Load ``panel.csv`` (and optionally ``groups.csv``) into a Panel."""
    path = Path(path)
    cells: dict[tuple[str, str, str, int], dict] = {}
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        required = {"country", "sector", "industry", "year", "factor", "quantity", "price"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise SchemaError(
                f"{path}: expected columns {sorted(required | {'investment_price'})}, "
                f"got {reader.fieldnames}"
            )
        for row_no, row in enumerate(reader, start=2):
            try:
                year = int(row["year"])
            except ValueError:
                raise SchemaError(f"{path} row {row_no}: bad year {row['year']!r}") from None
            key = (row["country"], row["sector"], row["industry"], year)
            cell = cells.setdefault(
                key, {"quantity": {}, "price": {}, "investment_price": {}, "output": None}
            )
            tag = row["factor"]
            quantity = _parse_positive(row_no, "quantity", row["quantity"])
            price = _parse_positive(row_no, "price", row["price"])
            inv_raw = (row.get("investment_price") or "").strip()
            if tag == OUTPUT_TAG:
                deflator = float(inv_raw) if inv_raw else 1.0
                cell["output"] = (quantity * price, deflator)
                continue
            try:
                factor = parse_factor(tag)
            except ValueError as exc:
                raise SchemaError(f"{path} row {row_no}: {exc}") from None
            if factor in cell["quantity"]:
                raise SchemaError(f"{path} row {row_no}: duplicate factor {tag} for {key}")
            cell["quantity"][factor] = quantity
            cell["price"][factor] = price
            if inv_raw:
                cell["investment_price"][factor] = float(inv_raw)

    groups: dict[tuple[str, str, str, int], dict[FactorKey, list[GroupCell]]] = {}
    if groups_path is not None:
        groups_path = Path(groups_path)
        with groups_path.open(newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            for row_no, row in enumerate(reader, start=2):
                key = (row["country"], row["sector"], row["industry"], int(row["year"]))
                try:
                    factor = parse_factor(row["factor"])
                except ValueError as exc:
                    raise SchemaError(f"{groups_path} row {row_no}: {exc}") from None
                cell = GroupCell(
                    age_group=row["age_group"],
                    edu_group=row["edu_group"],
                    hours=float(row["hours"]),
                    wage=float(row["wage"]),
                )
                groups.setdefault(key, {}).setdefault(factor, []).append(cell)

    observations = []
    for key, cell in cells.items():
        country, sector, industry, year = key
        if cell["output"] is None:
            raise SchemaError(f"{key}: no {OUTPUT_TAG} row in {path}")
        output_value, deflator = cell["output"]
        detail = {f: tuple(v) for f, v in groups.get(key, {}).items()}
        observations.append(
            PanelObservation(
                country=country,
                sector=sector,
                industry=industry,
                year=year,
                factor_quantity=cell["quantity"],
                factor_price=cell["price"],
                investment_price=cell["investment_price"],
                output_value=output_value,
                output_deflator=deflator,
                group_detail=detail,
            )
        )
    return Panel(
        observations=tuple(observations),
        base_year=base_year,
        markup=markup,
        zero_profit_tol=zero_profit_tol,
    )


def write_panel(panel: Panel, path) -> None:
    """Write a panel back to the ``panel.csv`` format (round-trips exactly)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["country", "sector", "industry", "year", "factor", "quantity", "price", "investment_price"]
        )
        for obs in panel.observations:
            prefix = [obs.country, obs.sector, obs.industry, obs.year]
            for f in FACTOR_ORDER:
                inv = obs.investment_price.get(f)
                writer.writerow(
                    prefix
                    + [
                        f.name,
                        repr(obs.factor_quantity[f]),
                        repr(obs.factor_price[f]),
                        "" if inv is None else repr(inv),
                    ]
                )
            # canonical factorization: quantity = deflated output, price = deflator
            writer.writerow(
                prefix
                + [
                    OUTPUT_TAG,
                    repr(obs.output_value / obs.output_deflator),
                    repr(obs.output_deflator),
                    repr(obs.output_deflator),
                ]
            )


def write_groups(panel: Panel, path) -> None:
    """Write group detail to the ``groups.csv`` format."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["country", "sector", "industry", "year", "factor", "age_group", "edu_group", "hours", "wage"]
        )
        for obs in panel.observations:
            for f in LABOR_FACTORS:
                for cell in obs.group_detail.get(f, ()):
                    writer.writerow(
                        [
                            obs.country,
                            obs.sector,
                            obs.industry,
                            obs.year,
                            f.name,
                            cell.age_group,
                            cell.edu_group,
                            repr(cell.hours),
                            repr(cell.wage),
                        ]
                    )


def load_cpi(path) -> dict[tuple[str, int], float]:
    """Load ``cpi.csv`` into a {(country, year): cpi} map."""
    path = Path(path)
    series: dict[tuple[str, int], float] = {}
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        for row_no, row in enumerate(reader, start=2):
            key = (row["country"], int(row["year"]))
            if key in series:
                raise SchemaError(f"{path} row {row_no}: duplicate cpi entry for {key}")
            value = float(row["cpi"])
            if not (value > 0.0):
                raise SchemaError(f"{path} row {row_no}: non-positive cpi {value}")
            series[key] = value
    return series


# ---------------------------------------------------------------------------
# Composition adjustment
# ---------------------------------------------------------------------------


def _group_key(cell: GroupCell) -> tuple[str, str]:
    return (cell.age_group, cell.edu_group)


def adjust_composition(
    raw: Panel, base_groups: Mapping[FactorKey, tuple[str, str]] = BASE_GROUP
) -> Panel:
    """Composition-adjust labor wages and hours per (country, sector, industry).

    For each labor factor the adjusted wage is the weighted mean of group
    wages with weights equal to the run's time-mean hours shares; adjusted
    hours are efficiency units, each group's hours scaled by the ratio of
    its time-mean wage to the base group's time-mean wage (prime-age
    high-educated for skilled labor, prime-age medium-educated for
    unskilled).  Groups with zero hours over the whole run are dropped (and
    logged); runs whose base group is missing are rejected with a
    diagnostic.  The result carries a single synthetic base group per labor
    factor, which makes the operation idempotent.

    Changing the base group leaves adjusted wages untouched and rescales
    each factor's adjusted hours by one constant per run, so log-differences
    — everything estimation consumes — are base-group invariant.
    """
    diagnostics: list[str] = []
    adjusted: list[PanelObservation] = []
    for run_key, run in raw.runs().items():
        run_label = "/".join(map(str, run_key))
        # gather per-factor group series across the run
        factor_series: dict[FactorKey, dict[tuple[str, str], dict[int, GroupCell]]] = {}
        rejected = False
        for f in LABOR_FACTORS:
            by_group: dict[tuple[str, str], dict[int, GroupCell]] = {}
            for obs in run:
                cells = obs.group_detail.get(f)
                if not cells:
                    raise SchemaError(
                        f"{obs._where()}: no group detail for labor factor {f.name}"
                    )
                for cell in cells:
                    by_group.setdefault(_group_key(cell), {})[obs.year] = cell
            # drop groups with zero total hours
            kept: dict[tuple[str, str], dict[int, GroupCell]] = {}
            for key, cells_by_year in by_group.items():
                if sum(c.hours for c in cells_by_year.values()) > 0.0:
                    kept[key] = cells_by_year
                else:
                    message = (
                        f"{run_label}: group {key} of {f.name} has zero hours "
                        "over the whole run; dropped"
                    )
                    diagnostics.append(message)
                    logger.info(message)
            if base_groups[f] not in kept:
                message = (
                    f"{run_label}: base group {base_groups[f]} missing for {f.name}; "
                    "observations rejected"
                )
                diagnostics.append(message)
                logger.warning(message)
                rejected = True
                break
            factor_series[f] = kept
        if rejected:
            continue

        years = [obs.year for obs in run]
        new_qty: dict[int, dict[FactorKey, float]] = {t: {} for t in years}
        new_price: dict[int, dict[FactorKey, float]] = {t: {} for t in years}
        new_detail: dict[int, dict[FactorKey, tuple[GroupCell, ...]]] = {t: {} for t in years}
        for f, by_group in factor_series.items():
            # time-mean hours shares (zero-hours years contribute share 0);
            # summed first and divided once so a full-presence group's mean
            # is exact (single-group runs must adjust to themselves
            # bit-identically)
            share_sums: dict[tuple[str, str], float] = {k: 0.0 for k in by_group}
            for t in years:
                total = sum(cells.get(t).hours if cells.get(t) else 0.0 for cells in by_group.values())
                if total <= 0.0:
                    raise SchemaError(
                        f"{run_label}/{t}: zero total hours for labor factor {f.name}"
                    )
                for key, cells in by_group.items():
                    cell = cells.get(t)
                    if cell is not None:
                        share_sums[key] += cell.hours / total
            mean_share = {key: value / len(years) for key, value in share_sums.items()}
            # time-mean wages over positive-hours years
            mean_wage: dict[tuple[str, str], float] = {}
            for key, cells in by_group.items():
                wages = [c.wage for c in cells.values() if c.hours > 0.0]
                mean_wage[key] = sum(wages) / len(wages)
            base_wage = mean_wage[base_groups[f]]

            for t in years:
                present = {
                    key: cells[t]
                    for key, cells in by_group.items()
                    if cells.get(t) is not None and cells[t].hours > 0.0
                }
                wage = sum(mean_share[key] * cell.wage for key, cell in present.items())
                if len(present) < len(by_group):
                    # a group absent this year: renormalize the wage weights
                    # over the groups present
                    weight_total = sum(mean_share[key] for key in present)
                    if weight_total <= 0.0:
                        raise SchemaError(
                            f"{run_label}/{t}: no positive-hours groups for {f.name}"
                        )
                    wage /= weight_total
                    message = (
                        f"{run_label}/{t}: {f.name} wage weights renormalized over "
                        f"{len(present)}/{len(by_group)} groups present"
                    )
                    diagnostics.append(message)
                    logger.info(message)
                hours = sum(
                    (mean_wage[key] / base_wage) * cell.hours for key, cell in present.items()
                )
                new_price[t][f] = wage
                new_qty[t][f] = hours
                new_detail[t][f] = (
                    GroupCell(
                        age_group=base_groups[f][0],
                        edu_group=base_groups[f][1],
                        hours=hours,
                        wage=wage,
                    ),
                )

        for obs in run:
            quantity = dict(obs.factor_quantity)
            price = dict(obs.factor_price)
            quantity.update(new_qty[obs.year])
            price.update(new_price[obs.year])
            adjusted.append(
                replace(
                    obs,
                    factor_quantity=quantity,
                    factor_price=price,
                    group_detail=new_detail[obs.year],
                )
            )

    return Panel(
        observations=tuple(adjusted),
        base_year=raw.base_year,
        markup=True,
        zero_profit_tol=None,
        diagnostics=raw.diagnostics + tuple(diagnostics),
    )


# ---------------------------------------------------------------------------
# Rental prices of capital
# ---------------------------------------------------------------------------


def _depreciation_map(depreciation: Mapping) -> dict[FactorKey, float]:
    rates: dict[FactorKey, float] = {}
    for f in CAPITAL_FACTORS:
        if f in depreciation:
            rates[f] = float(depreciation[f])
        elif f.name.lower() in depreciation:
            rates[f] = float(depreciation[f.name.lower()])
        else:
            raise SchemaError(f"missing depreciation rate for {f.name}")
        if not (0.0 <= rates[f] < 1.0):
            raise SchemaError(f"depreciation rate for {f.name} must lie in [0,1)")
    return rates


def _apply_rentals(
    panel: Panel,
    rentals: dict[tuple[tuple[str, str, str, int], FactorKey], float],
    flagged: dict[tuple[str, str, str, int], set[str]],
    diagnostics: list[str],
) -> Panel:
    updated = []
    for obs in panel.observations:
        price = dict(obs.factor_price)
        flags = set(obs.flags)
        for f in CAPITAL_FACTORS:
            rental = rentals.get((obs.key, f))
            if rental is None:
                continue
            if rental > 0.0:
                price[f] = rental
            else:
                message = (
                    f"{obs._where()}: computed rental price {rental:.6g} for {f.name} "
                    "is not positive; original price retained"
                )
                diagnostics.append(message)
                logger.warning(message)
                flags.add(NO_RENTAL_FLAG)
        flags.update(flagged.get(obs.key, ()))
        updated.append(replace(obs, factor_price=price, flags=frozenset(flags)))
    return Panel(
        observations=tuple(updated),
        base_year=panel.base_year,
        markup=panel.markup,
        zero_profit_tol=None,
        diagnostics=panel.diagnostics + tuple(diagnostics),
    )


def rental_price_internal(panel: Panel, depreciation: Mapping) -> Panel:
    """Rental prices from the internal-rate-of-return accounting identity.

    The per-(country, year) rate of return makes total rental payments equal
    nominal capital income (output value minus labor compensation), pooling
    both capital types and all sectors/industries of the country:

        rate_t = [capital income − sum(delta*q_t*k) + sum((q_t − q_{t-1})*k)]
                 / sum(q_{t-1}*k)

        rental_ft = delta_f*q_ft + rate_t*q_{f,t-1} − (q_ft − q_{f,t-1})

    Cells in their first observed year (no lagged investment price) are
    flagged and keep their original capital prices.
    """
    rates = _depreciation_map(depreciation)
    lagged: dict[tuple[tuple[str, str, str, int], FactorKey], float] = {}
    for run in panel.runs().values():
        for prev, cur in zip(run, run[1:]):
            for f in CAPITAL_FACTORS:
                lagged[(cur.key, f)] = prev.investment_price[f]

    by_country_year: dict[tuple[str, int], list[PanelObservation]] = {}
    for obs in panel.observations:
        by_country_year.setdefault((obs.country, obs.year), []).append(obs)

    rentals: dict[tuple[tuple[str, str, str, int], FactorKey], float] = {}
    flagged: dict[tuple[str, str, str, int], set[str]] = {}
    diagnostics: list[str] = []
    for (country, year), obs_list in sorted(by_country_year.items()):
        contributing = [o for o in obs_list if (o.key, FactorKey.Ki) in lagged]
        contributing_keys = {o.key for o in contributing}
        for obs in obs_list:
            if obs.key not in contributing_keys:
                flagged.setdefault(obs.key, set()).add(NO_RENTAL_FLAG)
        if not contributing:
            continue
        income = sum(o.output_value - o.labor_compensation() for o in contributing)
        depreciation_total = 0.0
        revaluation_total = 0.0
        denominator = 0.0
        for o in contributing:
            for f in CAPITAL_FACTORS:
                stock = o.factor_quantity[f]
                q_now = o.investment_price[f]
                q_prev = lagged[(o.key, f)]
                depreciation_total += rates[f] * q_now * stock
                revaluation_total += (q_now - q_prev) * stock
                denominator += q_prev * stock
        if denominator == 0.0:
            raise SchemaError(
                f"{country}/{year}: degenerate capital stock (zero lagged capital value)"
            )
        rate = (income - depreciation_total + revaluation_total) / denominator
        for o in contributing:
            for f in CAPITAL_FACTORS:
                q_now = o.investment_price[f]
                q_prev = lagged[(o.key, f)]
                rentals[(o.key, f)] = rates[f] * q_now + rate * q_prev - (q_now - q_prev)
    return _apply_rentals(panel, rentals, flagged, diagnostics)


def rental_price_external(
    panel: Panel, depreciation: Mapping, cpi: Mapping[tuple[str, int], float]
) -> Panel:
    """Rental prices from an external required rate of return.

    The rate is 4% plus a five-year centered mean of CPI inflation; the
    capital-gain term smooths investment-price changes over two years:

        rate_t = 0.04 + mean(inflation_{t-2} .. inflation_{t+2})
        rental_ft = delta_f*q_ft + rate_t*q_{f,t-1}
                    − 0.5*(ln q_ft − ln q_{f,t-2})*q_{f,t-1}

    Cells lacking the two investment-price lags are flagged
    "no-rental-price"; cells lacking the CPI window (years t−3..t+2) are
    flagged "no-cpi-window" and keep their original capital prices.
    """
    rates = _depreciation_map(depreciation)
    history: dict[tuple[tuple[str, str, str, int], FactorKey], tuple[float, float]] = {}
    for run in panel.runs().values():
        for prev2, prev, cur in zip(run, run[1:], run[2:]):
            for f in CAPITAL_FACTORS:
                history[(cur.key, f)] = (prev.investment_price[f], prev2.investment_price[f])

    rentals: dict[tuple[tuple[str, str, str, int], FactorKey], float] = {}
    flagged: dict[tuple[str, str, str, int], set[str]] = {}
    diagnostics: list[str] = []
    rate_cache: dict[tuple[str, int], float | None] = {}

    def required_rate(country: str, year: int) -> float | None:
        key = (country, year)
        if key not in rate_cache:
            inflations = []
            for offset in range(-2, 3):
                now = cpi.get((country, year + offset))
                before = cpi.get((country, year + offset - 1))
                if now is None or before is None:
                    rate_cache[key] = None
                    break
                inflations.append(now / before - 1.0)
            else:
                rate_cache[key] = 0.04 + sum(inflations) / len(inflations)
        return rate_cache[key]

    for obs in panel.observations:
        if (obs.key, FactorKey.Ki) not in history:
            flagged.setdefault(obs.key, set()).add(NO_RENTAL_FLAG)
            continue
        rate = required_rate(obs.country, obs.year)
        if rate is None:
            flagged.setdefault(obs.key, set()).add(NO_CPI_FLAG)
            message = f"{obs._where()}: insufficient cpi window for external rate of return"
            diagnostics.append(message)
            logger.info(message)
            continue
        for f in CAPITAL_FACTORS:
            q_now = obs.investment_price[f]
            q_prev, q_prev2 = history[(obs.key, f)]
            gain = 0.5 * (math.log(q_now) - math.log(q_prev2)) * q_prev
            rentals[(obs.key, f)] = rates[f] * q_now + rate * q_prev - gain
    return _apply_rentals(panel, rentals, flagged, diagnostics)


def deflate_panel(panel: Panel) -> Panel:
    """Divide all monetary columns by the output deflator (then reset it to 1).

    Run this after the rental-price computation: rentals are defined in
    nominal terms.
    """
    updated = []
    for obs in panel.observations:
        deflator = obs.output_deflator
        if deflator == 1.0:
            updated.append(obs)
            continue
        updated.append(
            replace(
                obs,
                factor_price={f: p / deflator for f, p in obs.factor_price.items()},
                investment_price={f: p / deflator for f, p in obs.investment_price.items()},
                output_value=obs.output_value / deflator,
                output_deflator=1.0,
            )
        )
    return panel.with_observations(updated)


def has_rental_price(obs: PanelObservation) -> bool:
    """True when the observation's capital prices are usable rental prices."""
    return not (obs.flags & RENTAL_EXCLUSION_FLAGS)
