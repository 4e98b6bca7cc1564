"""Economy-level substitution machinery.

This module evaluates the aggregate economy at a *point* — expenditure
shares by sector, factor income shares within each sector, aggregate factor
income shares, and factor quantity shares across sectors — and computes:

* the response of sector income shares to factor prices (from the nested
  technology's closed form),
* the price- and quantity-side response matrices obtained by weighting
  those responses across sectors and closing the loop through consumer
  demand,
* Morishima elasticities of substitution for the aggregate production and
  cost functions, their within/between-sector decomposition, and a
  closed-form weighted-average expression for the ICT-capital /
  female-skilled pair.

All factor-indexed arrays are 6x6 and ordered by :data:`FACTOR_ORDER`.
"""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .ces import SectorTechnology, share_derivative_matrix
from .errors import InvariantError, SchemaError
from .factors import FACTOR_ORDER, FactorKey
from .panel import Panel

__all__ = [
    "EconomyPoint",
    "PsiMatrices",
    "ElasticityMatrix",
    "economy_point",
    "share_price_derivatives",
    "psi_matrices",
    "morishima",
    "within_between",
    "weighted_average_form",
    "CONDITION_FLAG_THRESHOLD",
]

logger = logging.getLogger(__name__)

SHARE_TOL = 1e-12
CONDITION_FLAG_THRESHOLD = 1e10

# Weight families of the closed-form weighted-average elasticity, in report
# order: one per inner nest, one for the outer capital, one for consumption.
MU_FAMILIES = ("fh", "mh", "fu", "mu", "ko", "consumption")


def _check_unit_sum(total: float, what: str) -> None:
    if abs(total - 1.0) > SHARE_TOL:
        raise InvariantError(f"{what} sum to {total!r}, expected 1")


@dataclass(frozen=True)
class EconomyPoint:
    """Aggregate evaluation point.

    ``zeta`` maps sector -> expenditure share; ``sector_income_shares`` maps
    (factor, sector) -> the factor's share of the sector's total factor
    income; ``sector_quantity_shares`` maps (factor, sector) -> the sector's
    share of the economy-wide quantity of the factor; ``eta`` is the
    consumption substitution parameter (< 1).  ``aggregate_income_shares``
    (factor -> economy-wide income share) is derived from the other fields
    when omitted and validated against them when given.
    """

    zeta: Mapping[str, float]
    sector_income_shares: Mapping[tuple[FactorKey, str], float]
    sector_quantity_shares: Mapping[tuple[FactorKey, str], float]
    eta: float
    aggregate_income_shares: Mapping[FactorKey, float] | None = None

    def __post_init__(self) -> None:
        sectors = tuple(sorted(self.zeta))
        if not sectors:
            raise SchemaError("economy point needs at least one sector")
        object.__setattr__(self, "eta", float(self.eta))
        if not self.eta < 1.0:
            raise SchemaError("consumption substitution parameter must be < 1")

        zeta_vec = np.array([float(self.zeta[n]) for n in sectors])
        if np.any(zeta_vec <= 0.0):
            raise SchemaError("expenditure shares must be positive")
        _check_unit_sum(float(zeta_vec.sum()), "expenditure shares")

        income = np.empty((len(FACTOR_ORDER), len(sectors)))
        qshare = np.empty_like(income)
        for j, sector in enumerate(sectors):
            for i, factor in enumerate(FACTOR_ORDER):
                key = (factor, sector)
                try:
                    income[i, j] = float(self.sector_income_shares[key])
                    qshare[i, j] = float(self.sector_quantity_shares[key])
                except KeyError:
                    raise SchemaError(f"missing share entry for {key}") from None
        if np.any(income < 0.0) or np.any(qshare < 0.0):
            raise SchemaError("shares must be non-negative")
        for j, sector in enumerate(sectors):
            _check_unit_sum(float(income[:, j].sum()), f"income shares of sector {sector!r}")
        for i, factor in enumerate(FACTOR_ORDER):
            _check_unit_sum(float(qshare[i].sum()), f"quantity shares of factor {factor.name}")

        aggregate = income @ zeta_vec
        if self.aggregate_income_shares is not None:
            for i, factor in enumerate(FACTOR_ORDER):
                stated = float(self.aggregate_income_shares[factor])
                if abs(stated - aggregate[i]) > SHARE_TOL:
                    raise InvariantError(
                        f"aggregate income share of {factor.name} is {stated!r}; "
                        f"expenditure-weighted sector shares give {aggregate[i]!r}"
                    )
        object.__setattr__(self, "aggregate_income_shares",
                           {f: float(aggregate[i]) for i, f in enumerate(FACTOR_ORDER)})
        object.__setattr__(self, "_sectors", sectors)
        object.__setattr__(self, "_zeta_vec", zeta_vec)
        object.__setattr__(self, "_income", income)
        object.__setattr__(self, "_qshare", qshare)
        object.__setattr__(self, "_aggregate", aggregate)

    @property
    def sectors(self) -> tuple[str, ...]:
        return self._sectors

    def zeta_vector(self) -> np.ndarray:
        return self._zeta_vec.copy()

    def income_share_matrix(self) -> np.ndarray:
        """(6, n_sectors) array of within-sector income shares."""
        return self._income.copy()

    def quantity_share_matrix(self) -> np.ndarray:
        """(6, n_sectors) array of cross-sector quantity shares."""
        return self._qshare.copy()

    def aggregate_share_vector(self) -> np.ndarray:
        return self._aggregate.copy()

    def income_share_vector(self, sector: str) -> np.ndarray:
        return self._income[:, self._sectors.index(sector)].copy()


def economy_point(source, *, eta: float | None = None, weighting: str = "unweighted") -> EconomyPoint:
    """Build an :class:`EconomyPoint` from a panel or a simulator state.

    A simulator state (anything with an ``economy_point()`` method) reports
    its own internal accounting, including ``eta``.  From a panel, each share
    is computed per country-year and averaged: ``weighting="unweighted"``
    takes plain means, ``weighting="value"`` weights country-years by their
    total output value.  Country-years missing one of the panel's sectors
    are skipped with a logged warning.
    """
    method = getattr(source, "economy_point", None)
    if callable(method):
        if eta is not None:
            raise SchemaError("eta is determined by the simulator state")
        return method()
    if not isinstance(source, Panel):
        raise SchemaError(
            "economy_point needs a Panel or an object exposing economy_point()"
        )
    if eta is None:
        raise SchemaError("eta is required when building an economy point from a panel")
    if weighting not in ("unweighted", "value"):
        raise SchemaError(f"unknown weighting {weighting!r}")

    sectors = tuple(sorted({obs.sector for obs in source.observations}))
    if not sectors:
        raise SchemaError("panel has no observations")
    n_factors = len(FACTOR_ORDER)

    cells: dict[tuple[str, int], dict[str, dict]] = defaultdict(dict)
    for obs in source.observations:
        acc = cells[(obs.country, obs.year)].setdefault(
            obs.sector,
            {"value": 0.0, "bill": np.zeros(n_factors), "qty": np.zeros(n_factors)},
        )
        acc["value"] += obs.output_value
        for i, factor in enumerate(FACTOR_ORDER):
            acc["bill"][i] += obs.wage_bill(factor)
            acc["qty"][i] += obs.factor_quantity[factor]

    zeta_sum = np.zeros(len(sectors))
    income_sum = np.zeros((n_factors, len(sectors)))
    qshare_sum = np.zeros((n_factors, len(sectors)))
    weight_total = 0.0
    used = 0
    for (country, year), by_sector in sorted(cells.items()):
        if set(by_sector) != set(sectors):
            logger.warning(
                "country %r year %d misses a sector; excluded from the evaluation point",
                country,
                year,
            )
            continue
        values = np.array([by_sector[n]["value"] for n in sectors])
        total_value = values.sum()
        weight = total_value if weighting == "value" else 1.0
        quantities = np.column_stack([by_sector[n]["qty"] for n in sectors])
        zeta_sum += weight * values / total_value
        for j, sector in enumerate(sectors):
            bills = by_sector[sector]["bill"]
            income_sum[:, j] += weight * bills / bills.sum()
        qshare_sum += weight * quantities / quantities.sum(axis=1, keepdims=True)
        weight_total += weight
        used += 1
    if used == 0:
        raise SchemaError("no country-year observes every sector; cannot build the point")

    return EconomyPoint(
        zeta={n: float(zeta_sum[j] / weight_total) for j, n in enumerate(sectors)},
        sector_income_shares={
            (f, n): float(income_sum[i, j] / weight_total)
            for i, f in enumerate(FACTOR_ORDER)
            for j, n in enumerate(sectors)
        },
        sector_quantity_shares={
            (f, n): float(qshare_sum[i, j] / weight_total)
            for i, f in enumerate(FACTOR_ORDER)
            for j, n in enumerate(sectors)
        },
        eta=float(eta),
    )


def share_price_derivatives(
    techs: Mapping[str, SectorTechnology], point: EconomyPoint
) -> dict[tuple[FactorKey, str, FactorKey], float]:
    """Responses of within-sector income shares to factor prices.

    Returns a map (factor f, sector n, factor g) -> d ln(income share of f
    in n) / d ln(price of g), evaluated from the nested technology's closed
    form at the point's sector income shares.  The outer-layer capital's row
    and column are identically zero: its share is pinned by the exponent.
    """
    if set(techs) != set(point.sectors):
        raise SchemaError(
            f"technologies cover sectors {sorted(techs)}, point has {list(point.sectors)}"
        )
    out: dict[tuple[FactorKey, str, FactorKey], float] = {}
    for sector in point.sectors:
        matrix = share_derivative_matrix(
            point.income_share_vector(sector), techs[sector].sigmas
        )
        for i, f in enumerate(FACTOR_ORDER):
            for j, g in enumerate(FACTOR_ORDER):
                out[(f, sector, g)] = float(matrix[i, j])
    return out


def _derivative_array(
    derivs: Mapping[tuple[FactorKey, str, FactorKey], float], sectors
) -> np.ndarray:
    """(n_sectors, 6, 6) array view of the derivative map."""
    n_factors = len(FACTOR_ORDER)
    arr = np.empty((len(sectors), n_factors, n_factors))
    for k, sector in enumerate(sectors):
        for i, f in enumerate(FACTOR_ORDER):
            for j, g in enumerate(FACTOR_ORDER):
                try:
                    arr[k, i, j] = derivs[(f, sector, g)]
                except KeyError:
                    raise SchemaError(
                        f"share derivative missing for ({f.name}, {sector!r}, {g.name})"
                    ) from None
    return arr


@dataclass(frozen=True)
class PsiMatrices:
    """Price-side and quantity-side aggregate response matrices.

    ``psi_w[f, g]`` is the response of factor f's aggregate income share to
    the price of factor g; ``psi_l`` is the quantity-side counterpart,
    defined by ``psi_l = -(I - psi_w)^{-1} psi_w``.  The defining residual
    ``(I - psi_w) @ psi_l + psi_w`` must vanish to 1e-12 relative to the
    scale of ``psi_w``.  ``condition_number`` reports cond(I - psi_w);
    values above :data:`CONDITION_FLAG_THRESHOLD` set ``ill_conditioned``.
    """

    psi_w: np.ndarray
    psi_l: np.ndarray
    condition_number: float = field(default=float("nan"))

    def __post_init__(self) -> None:
        psi_w = np.array(self.psi_w, dtype=float)
        psi_l = np.array(self.psi_l, dtype=float)
        if psi_w.ndim != 2 or psi_w.shape[0] != psi_w.shape[1]:
            raise SchemaError("psi_w must be a square matrix")
        if psi_l.shape != psi_w.shape:
            raise SchemaError("psi_l must match psi_w in shape")
        identity = np.eye(psi_w.shape[0])
        residual = (identity - psi_w) @ psi_l + psi_w
        scale = max(1.0, float(np.max(np.abs(psi_w))))
        if float(np.max(np.abs(residual))) > 1e-12 * scale:
            raise InvariantError(
                "psi_l does not satisfy (I - psi_w) psi_l + psi_w = 0"
            )
        object.__setattr__(self, "psi_w", psi_w)
        object.__setattr__(self, "psi_l", psi_l)
        object.__setattr__(self, "condition_number", float(self.condition_number))

    @property
    def ill_conditioned(self) -> bool:
        return self.condition_number > CONDITION_FLAG_THRESHOLD


def _omega_weights(point: EconomyPoint) -> np.ndarray:
    """(6, n_sectors) income-based sector weights per factor.

    Row f is zeta_n * lambda_{f,n} / Lambda_f; a factor with zero aggregate
    income share gets a zero row.
    """
    zeta = point.zeta_vector()
    income = point.income_share_matrix()
    aggregate = point.aggregate_share_vector()
    omega = np.zeros_like(income)
    positive = aggregate > 0.0
    omega[positive] = income[positive] * zeta / aggregate[positive, None]
    return omega


def psi_matrices(
    derivs: Mapping[tuple[FactorKey, str, FactorKey], float], point: EconomyPoint
) -> PsiMatrices:
    """Aggregate the sector share derivatives into response matrices.

    ``psi_w[f, g] = sum_n omega_{f,n} (d_{f,g,n} + b * lambda_{g,n})`` with
    ``omega_{f,n} = zeta_n lambda_{f,n} / Lambda_f`` and ``b = 1 - 1/(1-eta)``;
    ``psi_l`` solves the stated inversion, with one step of iterative
    refinement to keep the defining residual at machine precision.
    """
    sectors = point.sectors
    d_arr = _derivative_array(derivs, sectors)
    income = point.income_share_matrix()
    omega = _omega_weights(point)
    b = 1.0 - 1.0 / (1.0 - point.eta)

    # psi_w[i, j] = sum_k omega[i, k] * (d_arr[k, i, j] + b * income[j, k])
    inner = d_arr + b * income.T[:, None, :]
    psi_w = np.einsum("ik,kij->ij", omega, inner)

    system = np.eye(len(FACTOR_ORDER)) - psi_w
    condition = float(np.linalg.cond(system))
    if condition > CONDITION_FLAG_THRESHOLD:
        logger.warning(
            "response-matrix system is ill-conditioned (cond %.3e); results flagged",
            condition,
        )
    psi_l = np.linalg.solve(system, -psi_w)
    for _ in range(2):
        residual = system @ psi_l + psi_w
        scale = max(1.0, float(np.max(np.abs(psi_w))))
        if float(np.max(np.abs(residual))) <= 1e-14 * scale:
            break
        psi_l = psi_l - np.linalg.solve(system, residual)
    return PsiMatrices(psi_w=psi_w, psi_l=psi_l, condition_number=condition)


@dataclass(frozen=True)
class ElasticityMatrix:
    """Factor-by-factor Morishima elasticities.

    ``values[f, g]`` is the elasticity for the ordered pair (f, g); the
    diagonal is not a value (NaN).  Asymmetry is expected.  ``se`` optionally
    carries bootstrap standard errors of the same shape.
    """

    side: str
    values: np.ndarray
    se: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.side not in ("production", "cost"):
            raise SchemaError(f"unknown elasticity side {self.side!r}")
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise SchemaError("elasticity values must form a square matrix")
        if not np.all(np.isnan(np.diagonal(values))):
            raise SchemaError("diagonal entries must be NaN (undefined)")
        off = ~np.eye(values.shape[0], dtype=bool)
        if not np.all(np.isfinite(values[off])):
            raise InvariantError("off-diagonal elasticities must be finite")
        object.__setattr__(self, "values", values)
        if self.se is not None:
            se = np.array(self.se, dtype=float)
            if se.shape != values.shape:
                raise SchemaError("standard errors must match the value shape")
            object.__setattr__(self, "se", se)

    def value(self, f: FactorKey, g: FactorKey) -> float:
        return float(self.values[int(f), int(g)])


def morishima(psi: PsiMatrices) -> tuple[ElasticityMatrix, ElasticityMatrix]:
    """Morishima elasticities for the aggregate production and cost sides.

    Production side: ``1/eps_F[f, g] = psi_l[f, g] - psi_l[g, g] + 1``.
    Cost side: ``eps_C[f, g] = psi_w[f, g] - psi_w[g, g] + 1``.
    """
    psi_w, psi_l = psi.psi_w, psi.psi_l
    n = psi_w.shape[0]
    inverse_production = psi_l - np.diagonal(psi_l)[None, :] + 1.0
    production = 1.0 / inverse_production
    cost = psi_w - np.diagonal(psi_w)[None, :] + 1.0
    diagonal = np.eye(n, dtype=bool)
    production[diagonal] = np.nan
    cost[diagonal] = np.nan
    return (
        ElasticityMatrix(side="production", values=production),
        ElasticityMatrix(side="cost", values=cost),
    )


def within_between(
    point: EconomyPoint,
    derivs: Mapping[tuple[FactorKey, str, FactorKey], float],
    f: FactorKey,
    g: FactorKey,
) -> tuple[float, float]:
    """Split the cost-side elasticity for (f, g) into sector-level
    substitution and cross-sector reallocation.

    The within term weights each sector's own cost-side elasticity by the
    sector's quantity share of factor g; the between term weights the
    sector's (f minus g) quantity-share difference against the share
    response.  At any internally consistent point the two add up to the
    aggregate cost-side elasticity.
    """
    f, g = FactorKey(f), FactorKey(g)
    if f == g:
        raise SchemaError("the substitution pair must be two distinct factors")
    b = 1.0 - 1.0 / (1.0 - point.eta)
    within = 0.0
    between = 0.0
    for sector in point.sectors:
        d_fg = derivs[(f, sector, g)]
        d_gg = derivs[(g, sector, g)]
        lam_g = point.sector_income_shares[(g, sector)]
        q_f = point.sector_quantity_shares[(f, sector)]
        q_g = point.sector_quantity_shares[(g, sector)]
        within += q_g * (d_fg - d_gg + 1.0)
        between += (q_f - q_g) * (d_fg + b * lam_g)
    return within, between


def weighted_average_form(
    point: EconomyPoint,
    techs: Mapping[str, SectorTechnology],
    f: FactorKey = FactorKey.Ki,
    g: FactorKey = FactorKey.Lfh,
) -> tuple[float, dict[tuple[str, str], float]]:
    """Closed-form weighted-average expression of the cost-side elasticity
    for the (innermost capital, innermost labor) pair.

    Returns the elasticity value and the weight map keyed by (family,
    sector), where the families are the four inner nests, the outer capital,
    and consumption.  The weights sum to one.  Only the (Ki, Lfh) pair has a
    closed form; other pairs raise.
    """
    if (FactorKey(f), FactorKey(g)) != (FactorKey.Ki, FactorKey.Lfh):
        raise SchemaError(
            "the closed-form weighted average is defined for the "
            "(Ki, Lfh) pair only"
        )
    if set(techs) != set(point.sectors):
        raise SchemaError(
            f"technologies cover sectors {sorted(techs)}, point has {list(point.sectors)}"
        )
    value = 0.0
    weights: dict[tuple[str, str], float] = {}
    consumption_term = 1.0 / (1.0 - point.eta)
    for sector in point.sectors:
        lam = point.income_share_vector(sector)
        tech = techs[sector]
        q_fh = point.sector_quantity_shares[(FactorKey.Lfh, sector)]
        q_ki = point.sector_quantity_shares[(FactorKey.Ki, sector)]
        s1 = lam[FactorKey.Ki] + lam[FactorKey.Lfh]
        s2 = s1 + lam[FactorKey.Lmh]
        s3 = s2 + lam[FactorKey.Lfu]
        s4 = s3 + lam[FactorKey.Lmu]
        if min(s1, s2, s3, s4) <= 0.0:
            raise SchemaError(
                f"sector {sector!r} has degenerate income shares; the "
                "weighted-average form is undefined"
            )
        lam_fh = lam[FactorKey.Lfh]
        diff = q_fh - q_ki
        mu = {
            "fh": q_fh * (1.0 - lam_fh / s1) + q_ki * (lam_fh / s1),
            "mh": diff * (lam_fh / s1) * (1.0 - s1 / s2),
            "fu": diff * (lam_fh / s2) * (1.0 - s2 / s3),
            "mu": diff * (lam_fh / s3) * (1.0 - s3 / s4),
            "ko": diff * (lam_fh / s4) * lam[FactorKey.Ko],
            "consumption": diff * (lam_fh / s4) * (1.0 - lam[FactorKey.Ko]),
        }
        for family, weight in mu.items():
            weights[(family, sector)] = weight
        value += (
            mu["fh"] / (1.0 - tech.sigma_fh)
            + mu["mh"] / (1.0 - tech.sigma_mh)
            + mu["fu"] / (1.0 - tech.sigma_fu)
            + mu["mu"] / (1.0 - tech.sigma_mu)
            + mu["ko"]
            + mu["consumption"] * consumption_term
        )
    total = math.fsum(weights.values())
    if abs(total - 1.0) > 1e-9:
        raise InvariantError(f"weighted-average weights sum to {total!r}, expected 1")
    return value, weights
