"""Decompositions of aggregate changes into per-factor contributions.

Three linear decompositions share one report shape: changes in relative
factor prices are attributed to factor-quantity movements through the
reciprocal production-side substitution elasticities, changes in relative
factor demand are attributed to factor-price movements through the cost-side
elasticities, and changes in factor income shares are attributed to either
quantities or prices through the share-response matrices.  A fourth
operation splits the growth of the total labor share into the four labor
types' own share growths, weighted by their sample-mean wage-bill shares.

Every report is additive by construction: the model column equals the exact
sum of the contribution columns, and the residual is the observed change
minus the model column.  The residual is reported, never spread over the
factors.

Elasticities and share responses are evaluated once, at the point the caller
supplies (sample means in the intended workflow), and held fixed across the
window; see :func:`decompose_wages` for the chained alternative.

Observed window changes are built by :func:`window_changes`.  Quantities are
normalized by real aggregate output and prices by the output price index
before differencing, so trends in scale cancel.  Per-country log changes are
averaged across countries by default; ``pooled=True`` sums across countries
first and takes one log change.

Standard errors come from :func:`cluster_bootstrap`, which resamples whole
countries with replacement, relabels each draw as a distinct cluster, and
reruns the caller's full pipeline on every resampled panel.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .aggregate import ElasticityMatrix, PsiMatrices
from .errors import EstimationError, InvariantError, SchemaError
from .factors import FACTOR_ORDER, LABOR_FACTORS, FactorKey
from .panel import Panel

logger = logging.getLogger(__name__)

# Display tags in price/quantity notation: labor rows carry wage symbols,
# capital rows rental symbols.
_TAG = {
    FactorKey.Ki: "i",
    FactorKey.Lfh: "fh",
    FactorKey.Lmh: "mh",
    FactorKey.Lfu: "fu",
    FactorKey.Lmu: "mu",
    FactorKey.Ko: "o",
}


def _price_symbol(f: FactorKey) -> str:
    return f"{'w' if f in LABOR_FACTORS else 'r'}_{_TAG[f]}"


def _quantity_symbol(f: FactorKey) -> str:
    return f"{'l' if f in LABOR_FACTORS else 'k'}_{_TAG[f]}"


def column_label(f: FactorKey) -> str:
    """Stable lowercase column name for a factor ("ki", "lfh", ..., "ko")."""
    return f.name.lower()


# Report rows, in the order the tables are conventionally read: the two
# same-skill gender gaps, then the two same-gender skill gaps.
DEFAULT_GAPS: tuple[tuple[FactorKey, FactorKey], ...] = (
    (FactorKey.Lmh, FactorKey.Lfh),
    (FactorKey.Lmu, FactorKey.Lfu),
    (FactorKey.Lmh, FactorKey.Lmu),
    (FactorKey.Lfh, FactorKey.Lfu),
)

# Income-share rows: skilled labor first, unskilled second.
DEFAULT_SHARE_FACTORS: tuple[FactorKey, ...] = (
    FactorKey.Lmh,
    FactorKey.Lfh,
    FactorKey.Lmu,
    FactorKey.Lfu,
)

_ADDITIVITY_TOL = 1e-9


@dataclass(frozen=True)
class DecompositionReport:
    """One decomposed aggregate change.

    ``contributions`` maps every factor to the part of the change its
    movement accounts for; ``model_change`` is their exact sum and
    ``residual`` is ``data_change - model_change``.  ``se`` optionally holds
    bootstrap standard errors keyed like :meth:`columns`.
    """

    target: str
    data_change: float
    model_change: float
    contributions: Mapping[FactorKey, float]
    residual: float
    se: Mapping[str, float] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "data_change", float(self.data_change))
        object.__setattr__(self, "model_change", float(self.model_change))
        object.__setattr__(self, "residual", float(self.residual))
        contribs = {f: float(v) for f, v in self.contributions.items()}
        object.__setattr__(self, "contributions", contribs)
        for f, value in contribs.items():
            if not isinstance(f, FactorKey):
                raise SchemaError(f"contribution key {f!r} is not a factor")
            if not math.isfinite(value):
                raise InvariantError(
                    f"{self.target}: non-finite contribution for {f.name}"
                )
        scale = max(1.0, abs(self.data_change), abs(self.model_change))
        total = math.fsum(contribs.values())
        if abs(total - self.model_change) > _ADDITIVITY_TOL * scale:
            raise InvariantError(
                f"{self.target}: model change {self.model_change} is not the "
                f"sum of contributions {total}"
            )
        if abs((self.data_change - self.model_change) - self.residual) > _ADDITIVITY_TOL * scale:
            raise InvariantError(
                f"{self.target}: residual {self.residual} is not data minus model"
            )

    def columns(self) -> dict[str, float]:
        """Flat column view: data, model, one column per factor, residual."""
        out = {"data": self.data_change, "model": self.model_change}
        for f in FACTOR_ORDER:
            if f in self.contributions:
                out[column_label(f)] = self.contributions[f]
        out["residual"] = self.residual
        return out

    def with_se(self, se: Mapping[str, float]) -> "DecompositionReport":
        """Copy of the report with bootstrap standard errors attached."""
        return replace(self, se=dict(se))


def _build_report(
    target: str, data_change: float | None, contributions: dict[FactorKey, float]
) -> DecompositionReport:
    model = math.fsum(contributions.values())
    data = model if data_change is None else float(data_change)
    return DecompositionReport(
        target=target,
        data_change=data,
        model_change=model,
        contributions=contributions,
        residual=data - model,
    )


def _change_vector(changes: Mapping[FactorKey, float], what: str) -> dict[FactorKey, float]:
    if not isinstance(changes, Mapping):
        raise SchemaError(f"{what} must be a mapping over the six factors")
    out: dict[FactorKey, float] = {}
    for f in FACTOR_ORDER:
        if f not in changes:
            raise SchemaError(f"{what} is missing factor {f.name}")
        value = float(changes[f])
        if not math.isfinite(value):
            raise SchemaError(f"{what} for {f.name} is not finite: {changes[f]}")
        out[f] = value
    return out


def _check_pairs(pairs: Sequence[tuple[FactorKey, FactorKey]]) -> None:
    for f, g in pairs:
        if not isinstance(f, FactorKey) or not isinstance(g, FactorKey):
            raise SchemaError(f"pair ({f!r}, {g!r}) does not name two factors")
        if f == g:
            raise SchemaError(f"pair compares {f.name} with itself")


def _reciprocal(elasticities: ElasticityMatrix, f: FactorKey, g: FactorKey) -> float:
    value = elasticities.value(f, g)
    if value == 0.0 or not math.isfinite(value):
        raise EstimationError(
            f"production elasticity for ({f.name}, {g.name}) is {value}; "
            "its reciprocal weight is undefined"
        )
    return 1.0 / value


def decompose_wages(
    elasticities: ElasticityMatrix,
    quantity_changes: Mapping[FactorKey, float],
    *,
    price_changes: Mapping[FactorKey, float] | None = None,
    gaps: Sequence[tuple[FactorKey, FactorKey]] = DEFAULT_GAPS,
) -> dict[tuple[FactorKey, FactorKey], DecompositionReport]:
    """Attribute relative factor-price changes to factor-quantity movements.

    For a gap between factors ``f`` and ``g``, each third factor ``h``
    contributes the difference of the reciprocal production-side
    elasticities toward ``f`` and toward ``g`` times its normalized quantity
    change; the pair's own quantities enter with the single reciprocal terms
    (``f`` negatively through the elasticity of ``g`` toward ``f``, ``g``
    positively through the elasticity of ``f`` toward ``g``).  When all
    elasticities share one value, every cross term cancels and the model
    collapses to the classic form: minus the relative quantity change over
    the common elasticity.

    ``price_changes``, when given, supplies the observed side: the data
    column is the difference of the two factors' normalized price changes
    (the output-price normalization cancels inside a ratio).  Without it the
    data column mirrors the model and the residual is zero.

    Elasticities are evaluated at one point and reused for every gap.  For a
    chained decomposition, call once per subperiod with elasticities
    re-evaluated at each subperiod's point and sum the reports.
    """
    if elasticities.side != "production":
        raise SchemaError(
            f"wage decomposition needs production-side elasticities, got {elasticities.side!r}"
        )
    _check_pairs(gaps)
    dq = _change_vector(quantity_changes, "quantity changes")
    dw = None if price_changes is None else _change_vector(price_changes, "price changes")
    reports: dict[tuple[FactorKey, FactorKey], DecompositionReport] = {}
    for f, g in gaps:
        contributions: dict[FactorKey, float] = {}
        for h in FACTOR_ORDER:
            if h == f:
                coefficient = -_reciprocal(elasticities, g, f)
            elif h == g:
                coefficient = _reciprocal(elasticities, f, g)
            else:
                coefficient = _reciprocal(elasticities, f, h) - _reciprocal(
                    elasticities, g, h
                )
            contributions[h] = coefficient * dq[h]
        observed = None if dw is None else dw[f] - dw[g]
        target = f"ln({_price_symbol(f)}/{_price_symbol(g)})"
        reports[(f, g)] = _build_report(target, observed, contributions)
    return reports


def decompose_demand(
    elasticities: ElasticityMatrix,
    price_changes: Mapping[FactorKey, float],
    *,
    quantity_changes: Mapping[FactorKey, float] | None = None,
    pairs: Sequence[tuple[FactorKey, FactorKey]] = DEFAULT_GAPS,
) -> dict[tuple[FactorKey, FactorKey], DecompositionReport]:
    """Attribute relative factor-demand changes to factor-price movements.

    The mirror image of :func:`decompose_wages` on the cost side: for the
    demand ratio of ``f`` to ``g``, a third factor ``h`` contributes the
    difference of the cost-side elasticities (no reciprocals) times its
    normalized price change, and the pair's own prices enter with the single
    elasticity terms.  ``quantity_changes``, when given, supplies the
    observed relative-quantity change for the data column.
    """
    if elasticities.side != "cost":
        raise SchemaError(
            f"demand decomposition needs cost-side elasticities, got {elasticities.side!r}"
        )
    _check_pairs(pairs)
    dw = _change_vector(price_changes, "price changes")
    dq = None if quantity_changes is None else _change_vector(
        quantity_changes, "quantity changes"
    )
    reports: dict[tuple[FactorKey, FactorKey], DecompositionReport] = {}
    for f, g in pairs:
        contributions: dict[FactorKey, float] = {}
        for h in FACTOR_ORDER:
            if h == f:
                coefficient = -elasticities.value(g, f)
            elif h == g:
                coefficient = elasticities.value(f, g)
            else:
                coefficient = elasticities.value(f, h) - elasticities.value(g, h)
            contributions[h] = coefficient * dw[h]
        observed = None if dq is None else dq[f] - dq[g]
        target = f"ln({_quantity_symbol(f)}/{_quantity_symbol(g)})"
        reports[(f, g)] = _build_report(target, observed, contributions)
    return reports


def decompose_shares(
    psi: PsiMatrices,
    changes: Mapping[FactorKey, float],
    *,
    route: str = "quantity",
    counterpart_changes: Mapping[FactorKey, float] | None = None,
    factors: Sequence[FactorKey] = DEFAULT_SHARE_FACTORS,
) -> dict[FactorKey, DecompositionReport]:
    """Attribute income-share changes to quantity or price movements.

    ``route="quantity"`` multiplies the quantity-response rows of ``psi`` by
    normalized quantity changes; ``route="price"`` uses the price-response
    rows and normalized price changes.  ``counterpart_changes`` carries the
    other side's change map and is used only to reconstruct the observed
    share change (a factor's income share moves by its normalized price
    change plus its normalized quantity change, an exact accounting
    identity); without it the data column mirrors the model.
    """
    if route not in ("quantity", "price"):
        raise SchemaError(f"route must be 'quantity' or 'price', got {route!r}")
    matrix = psi.psi_l if route == "quantity" else psi.psi_w
    dx = _change_vector(changes, f"{route} changes")
    other = (
        None
        if counterpart_changes is None
        else _change_vector(counterpart_changes, "counterpart changes")
    )
    reports: dict[FactorKey, DecompositionReport] = {}
    for f in factors:
        if not isinstance(f, FactorKey):
            raise SchemaError(f"share target {f!r} is not a factor")
        contributions = {
            g: float(matrix[int(f), int(g)]) * dx[g] for g in FACTOR_ORDER
        }
        observed = None if other is None else dx[f] + other[f]
        reports[f] = _build_report(
            f"ln(share_{column_label(f)})", observed, contributions
        )
    return reports


# ---------------------------------------------------------------------------
# Observed window changes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowChanges:
    """Observed log changes over a panel window, per factor.

    ``quantity`` holds changes of quantities per unit of real output,
    ``price`` of prices per unit of the output price index, and ``share`` of
    nominal income shares.  By construction ``share = price + quantity``
    factor by factor.  ``countries`` lists the countries that entered the
    aggregation.
    """

    window: tuple[int, int]
    quantity: Mapping[FactorKey, float]
    price: Mapping[FactorKey, float]
    share: Mapping[FactorKey, float]
    countries: tuple[str, ...]


def _country_year_totals(panel: Panel) -> dict[tuple[str, int], dict]:
    """Aggregate observations to country-year totals.

    Returns per (country, year): nominal output value, real output (values
    deflated observation by observation), and per-factor quantities and
    wage bills summed across sectors and industries.
    """
    totals: dict[tuple[str, int], dict] = {}
    for obs in panel.observations:
        cell = totals.setdefault(
            (obs.country, obs.year),
            {
                "value": 0.0,
                "real": 0.0,
                "quantity": {f: 0.0 for f in FACTOR_ORDER},
                "bill": {f: 0.0 for f in FACTOR_ORDER},
            },
        )
        cell["value"] += obs.output_value
        cell["real"] += obs.output_value / obs.output_deflator
        for f in FACTOR_ORDER:
            cell["quantity"][f] += obs.factor_quantity[f]
            cell["bill"][f] += obs.wage_bill(f)
    return totals


def _resolve_window(panel: Panel, window: tuple[int, int] | None) -> tuple[int, int]:
    years = sorted({obs.year for obs in panel.observations})
    if not years:
        raise SchemaError("panel has no observations")
    if window is None:
        start, end = years[0], years[-1]
    else:
        start, end = int(window[0]), int(window[1])
    if start >= end:
        raise SchemaError(f"window must run forward, got {start}:{end}")
    for year in (start, end):
        if year not in years:
            raise SchemaError(f"window year {year} is not observed in the panel")
    return start, end


def _window_countries(
    totals: Mapping[tuple[str, int], dict], start: int, end: int
) -> tuple[str, ...]:
    countries = sorted({country for country, _ in totals})
    usable = []
    for country in countries:
        if (country, start) in totals and (country, end) in totals:
            usable.append(country)
        else:
            logger.warning(
                "country %r misses a window endpoint (%d or %d); excluded",
                country,
                start,
                end,
            )
    if not usable:
        raise SchemaError(f"no country observes both window years {start} and {end}")
    return tuple(usable)


def _cell_rates(cell: Mapping) -> tuple[dict[FactorKey, float], ...]:
    """ln of normalized quantity, normalized price, and income share."""
    price_index = cell["value"] / cell["real"]
    ln_quantity: dict[FactorKey, float] = {}
    ln_price: dict[FactorKey, float] = {}
    ln_share: dict[FactorKey, float] = {}
    for f in FACTOR_ORDER:
        quantity = cell["quantity"][f]
        bill = cell["bill"][f]
        if quantity <= 0.0 or bill <= 0.0:
            raise SchemaError(f"factor {f.name} has no positive quantity or payment")
        price = bill / quantity
        ln_quantity[f] = math.log(quantity / cell["real"])
        ln_price[f] = math.log(price / price_index)
        ln_share[f] = math.log(bill / cell["value"])
    return ln_quantity, ln_price, ln_share


def window_changes(
    panel: Panel, window: tuple[int, int] | None = None, *, pooled: bool = False
) -> WindowChanges:
    """Observed normalized log changes between two panel years.

    Factor quantities are divided by real aggregate output and factor prices
    by the output price index (nominal value over deflated value), both per
    country-year after summing across sectors and industries.  With
    ``pooled=False`` (default) each country's log change is computed
    separately and averaged across countries; ``pooled=True`` sums levels
    across countries first and takes a single log change.  Countries missing
    either endpoint year are excluded with a logged warning.
    """
    if not isinstance(panel, Panel):
        raise SchemaError("window_changes needs a Panel")
    totals = _country_year_totals(panel)
    start, end = _resolve_window(panel, window)
    countries = _window_countries(totals, start, end)

    if pooled:
        merged: dict[int, dict] = {}
        for year in (start, end):
            cell = {
                "value": 0.0,
                "real": 0.0,
                "quantity": {f: 0.0 for f in FACTOR_ORDER},
                "bill": {f: 0.0 for f in FACTOR_ORDER},
            }
            for country in countries:
                part = totals[(country, year)]
                cell["value"] += part["value"]
                cell["real"] += part["real"]
                for f in FACTOR_ORDER:
                    cell["quantity"][f] += part["quantity"][f]
                    cell["bill"][f] += part["bill"][f]
            merged[year] = cell
        q0, p0, s0 = _cell_rates(merged[start])
        q1, p1, s1 = _cell_rates(merged[end])
        quantity = {f: q1[f] - q0[f] for f in FACTOR_ORDER}
        price = {f: p1[f] - p0[f] for f in FACTOR_ORDER}
        share = {f: s1[f] - s0[f] for f in FACTOR_ORDER}
    else:
        sums = {
            "quantity": {f: [] for f in FACTOR_ORDER},
            "price": {f: [] for f in FACTOR_ORDER},
            "share": {f: [] for f in FACTOR_ORDER},
        }
        for country in countries:
            q0, p0, s0 = _cell_rates(totals[(country, start)])
            q1, p1, s1 = _cell_rates(totals[(country, end)])
            for f in FACTOR_ORDER:
                sums["quantity"][f].append(q1[f] - q0[f])
                sums["price"][f].append(p1[f] - p0[f])
                sums["share"][f].append(s1[f] - s0[f])
        quantity = {f: math.fsum(sums["quantity"][f]) / len(countries) for f in FACTOR_ORDER}
        price = {f: math.fsum(sums["price"][f]) / len(countries) for f in FACTOR_ORDER}
        share = {f: math.fsum(sums["share"][f]) / len(countries) for f in FACTOR_ORDER}

    return WindowChanges(
        window=(start, end),
        quantity=quantity,
        price=price,
        share=share,
        countries=countries,
    )


# ---------------------------------------------------------------------------
# Labor-share split
# ---------------------------------------------------------------------------

# Presentation order for the labor-share split: skilled types first, male
# before female within a skill level.
_SPLIT_ORDER: tuple[FactorKey, ...] = (
    FactorKey.Lmh,
    FactorKey.Lfh,
    FactorKey.Lmu,
    FactorKey.Lfu,
)


@dataclass(frozen=True)
class LaborShareSplit:
    """Growth of the total labor share split over the four labor types.

    ``total`` is the weighted sum of the labor types' income-share growth
    rates, with weights equal to each type's share of the total wage bill
    averaged over every country-year in the window.  ``exact_change`` is the
    observed log change of the total labor share itself; ``residual`` is the
    approximation gap ``exact_change - total``.
    """

    window: tuple[int, int]
    weights: Mapping[FactorKey, float]
    growth: Mapping[FactorKey, float]
    terms: Mapping[FactorKey, float]
    total: float
    exact_change: float
    residual: float
    countries: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        weight_sum = math.fsum(self.weights.values())
        if abs(weight_sum - 1.0) > 1e-12:
            raise InvariantError(
                f"labor-share weights sum to {weight_sum}, not 1"
            )
        for f in self.weights:
            term = self.weights[f] * self.growth[f]
            if abs(term - self.terms[f]) > 1e-12 * max(1.0, abs(term)):
                raise InvariantError(f"term for {f.name} is not weight times growth")
        total = math.fsum(self.terms.values())
        if abs(total - self.total) > 1e-12 * max(1.0, abs(total)):
            raise InvariantError("total is not the sum of the terms")


def labor_share_split(
    panel: Panel, window: tuple[int, int] | None = None, *, pooled: bool = False
) -> LaborShareSplit:
    """Split total labor-share growth into the four labor types' growths.

    The growth rate of each labor type's income share over the window is
    weighted by that type's share of the total wage bill, evaluated as the
    plain mean over all country-years inside the window.  ``pooled``
    controls how the per-type growth rates and the exact change are
    aggregated across countries, exactly as in :func:`window_changes`.
    """
    if not isinstance(panel, Panel):
        raise SchemaError("labor_share_split needs a Panel")
    totals = _country_year_totals(panel)
    start, end = _resolve_window(panel, window)
    countries = _window_countries(totals, start, end)

    # Wage-bill weights: mean across every country-year inside the window.
    weight_rows: dict[FactorKey, list[float]] = {f: [] for f in LABOR_FACTORS}
    for (country, year), cell in sorted(totals.items()):
        if not (start <= year <= end) or country not in countries:
            continue
        labor_bill = math.fsum(cell["bill"][f] for f in LABOR_FACTORS)
        if labor_bill <= 0.0:
            raise SchemaError(f"country {country!r} year {year} pays no labor")
        for f in LABOR_FACTORS:
            weight_rows[f].append(cell["bill"][f] / labor_bill)
    count = len(weight_rows[LABOR_FACTORS[0]])
    raw_weights = {f: math.fsum(weight_rows[f]) / count for f in LABOR_FACTORS}
    # The per-cell rows each sum to one; renormalize away the float dust so
    # the unit-sum invariant holds exactly.
    weight_sum = math.fsum(raw_weights.values())
    weights = {f: raw_weights[f] / weight_sum for f in _SPLIT_ORDER}

    def share_paths(country: str) -> tuple[dict[FactorKey, float], float]:
        growth: dict[FactorKey, float] = {}
        first = totals[(country, start)]
        last = totals[(country, end)]
        for f in LABOR_FACTORS:
            if first["bill"][f] <= 0.0 or last["bill"][f] <= 0.0:
                raise SchemaError(f"country {country!r} pays nothing to {f.name}")
            growth[f] = math.log(last["bill"][f] / last["value"]) - math.log(
                first["bill"][f] / first["value"]
            )
        labor0 = math.fsum(first["bill"][f] for f in LABOR_FACTORS) / first["value"]
        labor1 = math.fsum(last["bill"][f] for f in LABOR_FACTORS) / last["value"]
        return growth, math.log(labor1 / labor0)

    if pooled:
        merged: dict[int, dict[str, float | dict]] = {}
        for year in (start, end):
            bill = {f: 0.0 for f in LABOR_FACTORS}
            value = 0.0
            for country in countries:
                part = totals[(country, year)]
                value += part["value"]
                for f in LABOR_FACTORS:
                    bill[f] += part["bill"][f]
            merged[year] = {"value": value, "bill": bill}
        growth = {
            f: math.log(merged[end]["bill"][f] / merged[end]["value"])
            - math.log(merged[start]["bill"][f] / merged[start]["value"])
            for f in _SPLIT_ORDER
        }
        labor = [
            math.fsum(merged[year]["bill"][f] for f in LABOR_FACTORS)
            / merged[year]["value"]
            for year in (start, end)
        ]
        exact = math.log(labor[1] / labor[0])
    else:
        per_country = [share_paths(country) for country in countries]
        growth = {
            f: math.fsum(g[f] for g, _ in per_country) / len(countries)
            for f in _SPLIT_ORDER
        }
        exact = math.fsum(e for _, e in per_country) / len(countries)

    terms = {f: weights[f] * growth[f] for f in _SPLIT_ORDER}
    total = math.fsum(terms.values())
    return LaborShareSplit(
        window=(start, end),
        weights=weights,
        growth=growth,
        terms=terms,
        total=total,
        exact_change=exact,
        residual=exact - total,
        countries=countries,
    )


# ---------------------------------------------------------------------------
# Cluster bootstrap
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapResult:
    """Bootstrap standard errors for a nested {row: {column: value}} table."""

    se: Mapping[str, Mapping[str, float]]
    replications: int
    redraws: int


def _worker_count(reps: int) -> int:
    raw = os.environ.get("CES_RACE_THREADS")
    if raw is not None and raw.strip():
        try:
            count = int(raw)
        except ValueError:
            raise SchemaError(
                f"CES_RACE_THREADS must be an integer, got {raw!r}"
            ) from None
        if count < 1:
            raise SchemaError(f"CES_RACE_THREADS must be at least 1, got {count}")
    else:
        count = min(8, os.cpu_count() or 1)
    return max(1, min(count, reps))


def _resample_panel(
    panel: Panel, by_country: Mapping[str, tuple], names: Sequence[str], draw: np.ndarray
) -> Panel:
    observations = []
    for position, index in enumerate(draw):
        name = names[int(index)]
        label = f"{name}#{position}"
        observations.extend(
            replace(obs, country=label) for obs in by_country[name]
        )
    return Panel(
        observations=tuple(observations),
        base_year=panel.base_year,
        markup=panel.markup,
        zero_profit_tol=panel.zero_profit_tol,
    )


def cluster_bootstrap(
    pipeline: Callable[[Panel], Mapping[str, Mapping[str, float]]],
    panel: Panel,
    *,
    reps: int = 500,
    seed: int,
    max_redraw_share: float = 0.1,
) -> BootstrapResult:
    """Country-cluster bootstrap standard errors for a full pipeline.

    Each replication draws countries with replacement (as many as the panel
    holds), relabels every draw as its own cluster so repeats stay distinct
    for clustering and instrument construction, and calls ``pipeline`` on
    the resampled panel.  The pipeline returns a nested mapping
    {row: {column: value}}; the result holds the sample standard deviation
    of every cell across replications.

    All draws, including a reserve pool for redraws, are generated up front
    from ``seed``, and redraws are assigned to failed replications in
    replication order, so results are bit-identical for a given seed no
    matter how many worker threads run (thread count comes from the
    ``CES_RACE_THREADS`` environment variable).  A replication that fails
    estimation is redrawn from the reserve pool; if more than
    ``max_redraw_share`` of ``reps`` redraws are needed, the bootstrap
    aborts.
    """
    if not isinstance(panel, Panel):
        raise SchemaError("cluster_bootstrap needs a Panel")
    if reps < 2:
        raise SchemaError(f"at least two replications are required, got {reps}")
    names = panel.countries()
    if len(names) < 2:
        raise SchemaError("bootstrap needs at least two countries to resample")
    by_country: dict[str, tuple] = {name: () for name in names}
    for obs in panel.observations:
        by_country[obs.country] = by_country[obs.country] + (obs,)

    max_redraws = int(math.floor(max_redraw_share * reps))
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, len(names), size=(reps + max_redraws, len(names)))

    def run_one(draw_index: int):
        resampled = _resample_panel(panel, by_country, names, draws[draw_index])
        return pipeline(resampled)

    results: dict[int, Mapping[str, Mapping[str, float]]] = {}
    pending = list(range(reps))
    next_reserve = reps
    redraws = 0
    failures: list[str] = []
    workers = _worker_count(reps)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        while pending:
            outcomes = list(pool.map(_guarded(run_one), pending))
            retry: list[int] = []
            for slot, outcome in zip(pending, outcomes):
                if isinstance(outcome, Exception):
                    failures.append(str(outcome))
                    redraws += 1
                    if redraws > max_redraws:
                        raise EstimationError(
                            f"bootstrap aborted: {redraws} redraws exceed "
                            f"{max_redraws} ({max_redraw_share:.0%} of {reps} "
                            f"replications); last failure: {outcome}"
                        )
                    retry.append(next_reserve)
                    next_reserve += 1
                else:
                    results[slot] = outcome
            pending = retry
    if redraws:
        logger.info(
            "bootstrap: %d of %d draws failed estimation and were redrawn (%s)",
            redraws,
            reps + redraws,
            failures[-1],
        )

    tables = list(results.values())
    rows = list(tables[0])
    for table in tables:
        if list(table) != rows:
            raise InvariantError("bootstrap replications disagree on report rows")
    se: dict[str, dict[str, float]] = {}
    for row in rows:
        columns = list(tables[0][row])
        se[row] = {}
        for column in columns:
            values = np.array([float(table[row][column]) for table in tables])
            se[row][column] = float(np.std(values, ddof=1))
    return BootstrapResult(se=se, replications=reps, redraws=redraws)


def _guarded(call: Callable[[int], Mapping]) -> Callable[[int], object]:
    """Turn estimation failures into return values so the pool keeps order."""

    def wrapped(index: int):
        try:
            return call(index)
        except (EstimationError, SchemaError, InvariantError, np.linalg.LinAlgError) as exc:
            return exc

    return wrapped


def attach_bootstrap_se(
    reports: Mapping, result: BootstrapResult
) -> dict:
    """Attach bootstrap standard errors to reports by their target names."""
    out = {}
    for key, report in reports.items():
        se = result.se.get(report.target)
        out[key] = report if se is None else report.with_se(se)
    return out
