"""Shared constructors and constants for the test suite."""
from __future__ import annotations

import numpy as np

from ces_race.ces import SectorTechnology
from ces_race.factors import FACTOR_ORDER, FactorKey

# Benchmark substitution parameters in nest order (fh, mh, fu, mu).
GOODS_SIGMAS = (-0.793, 0.353, 0.591, 0.797)
SERVICE_SIGMAS = (-0.444, 0.321, 0.555, 0.844)


def make_tech(
    sigmas,
    thetas=(0.5, 0.5, 0.5, 0.5),
    alpha: float = 0.3,
    tfp: float = 1.0,
) -> SectorTechnology:
    s_fh, s_mh, s_fu, s_mu = sigmas
    t_fh, t_mh, t_fu, t_mu = thetas
    return SectorTechnology(
        tfp=tfp,
        alpha=alpha,
        theta_fh=t_fh,
        theta_mh=t_mh,
        theta_fu=t_fu,
        theta_mu=t_mu,
        sigma_fh=s_fh,
        sigma_mh=s_mh,
        sigma_fu=s_fu,
        sigma_mu=s_mu,
    )


def random_tech(rng: np.random.Generator, alpha_range=(0.05, 0.8)) -> SectorTechnology:
    sigmas = rng.uniform(-3.0, 0.9, size=4)
    thetas = rng.uniform(0.1, 0.9, size=4)
    alpha = float(rng.uniform(*alpha_range))
    tfp = float(rng.uniform(0.5, 2.0))
    return make_tech(sigmas, thetas, alpha=alpha, tfp=tfp)


def random_inputs(rng: np.random.Generator, low: float = 0.2, high: float = 5.0):
    values = np.exp(rng.uniform(np.log(low), np.log(high), size=6))
    return {f: float(values[f]) for f in FACTOR_ORDER}


def as_input_map(values) -> dict[FactorKey, float]:
    arr = np.asarray(values, dtype=float)
    return {f: float(arr[f]) for f in FACTOR_ORDER}


def make_obs(
    country: str = "aa",
    sector: str = "goods",
    industry: str = "ind1",
    year: int = 2000,
    quantities=None,
    prices=None,
    investment_prices=None,
    output_value: float | None = None,
    deflator: float = 1.0,
    group_detail=None,
    flags=frozenset(),
):
    """PanelObservation with unit defaults and exact zero profit."""
    from ces_race.panel import PanelObservation

    quantity = {f: 1.0 for f in FACTOR_ORDER}
    quantity.update(quantities or {})
    price = {f: 1.0 for f in FACTOR_ORDER}
    price.update(prices or {})
    investment = {FactorKey.Ki: 1.0, FactorKey.Ko: 1.0}
    investment.update(investment_prices or {})
    if output_value is None:
        output_value = sum(price[f] * quantity[f] for f in FACTOR_ORDER)
    return PanelObservation(
        country=country,
        sector=sector,
        industry=industry,
        year=year,
        factor_quantity=quantity,
        factor_price=price,
        investment_price=investment,
        output_value=output_value,
        output_deflator=deflator,
        group_detail=group_detail or {},
        flags=flags,
    )


def base_group_detail(quantity: dict, price: dict):
    """Single base-group detail matching the observation's labor rows."""
    from ces_race.panel import BASE_GROUP, GroupCell

    detail = {}
    for f, (age, edu) in BASE_GROUP.items():
        detail[f] = (
            GroupCell(age_group=age, edu_group=edu, hours=quantity.get(f, 1.0), wage=price.get(f, 1.0)),
        )
    return detail


def random_point(rng, sectors=("goods", "service"), eta=None, ko_share=None):
    """Internally consistent random economy point.

    Quantity shares are derived from the income shares and expenditure
    shares (common factor prices across sectors), so every cross-formula
    identity that presumes consistency holds exactly.  ``ko_share`` forces
    the outer capital's income share in every sector (0 removes it).
    """
    from ces_race.aggregate import EconomyPoint

    n = len(sectors)
    if eta is None:
        eta = float(rng.uniform(-1.5, 0.8))
    zeta = rng.uniform(0.5, 2.0, n)
    zeta = zeta / zeta.sum()
    income = rng.uniform(0.2, 2.0, (len(FACTOR_ORDER), n))
    if ko_share is not None:
        ko = np.broadcast_to(np.asarray(ko_share, dtype=float), (n,))
        income[FactorKey.Ko] = 0.0
        income = income / income.sum(axis=0) * (1.0 - ko)
        income[FactorKey.Ko] = ko
    else:
        income = income / income.sum(axis=0)
    aggregate = income @ zeta
    qshare = np.empty_like(income)
    for i in range(len(FACTOR_ORDER)):
        if aggregate[i] > 0.0:
            qshare[i] = income[i] * zeta / aggregate[i]
        else:
            qshare[i] = zeta
    return EconomyPoint(
        zeta={s: float(zeta[j]) for j, s in enumerate(sectors)},
        sector_income_shares={
            (f, s): float(income[i, j])
            for i, f in enumerate(FACTOR_ORDER)
            for j, s in enumerate(sectors)
        },
        sector_quantity_shares={
            (f, s): float(qshare[i, j])
            for i, f in enumerate(FACTOR_ORDER)
            for j, s in enumerate(sectors)
        },
        eta=eta,
    )


def random_sector_techs(rng, sectors=("goods", "service")):
    """Random technologies keyed by sector (only sigmas matter for shares)."""
    return {s: random_tech(rng) for s in sectors}


def random_economy_spec(rng, eta=None, alpha_range=(0.05, 0.8), sectors=("goods", "service")):
    """Random full economy: techs, demand weights, endowments."""
    from ces_race.equilibrium import EconomySpec

    if eta is None:
        eta = float(rng.uniform(-1.5, 0.8))
    techs = {s: random_tech(rng, alpha_range=alpha_range) for s in sectors}
    theta_c = {s: float(rng.uniform(0.2, 0.8)) for s in sectors}
    factors = list(FACTOR_ORDER)
    if all(t.alpha == 0.0 for t in techs.values()):
        factors.remove(FactorKey.Ko)
    endowments = {f: float(rng.uniform(0.5, 2.0)) for f in factors}
    return EconomySpec(eta=eta, theta_c=theta_c, techs=techs, endowments=endowments)


def benchmark_economy(eta: float = 0.2):
    """Two-sector economy at the benchmark substitution parameters."""
    from ces_race.equilibrium import EconomySpec

    techs = {"goods": make_tech(GOODS_SIGMAS), "service": make_tech(SERVICE_SIGMAS)}
    return EconomySpec(
        eta=eta,
        theta_c={"goods": 0.5, "service": 0.5},
        techs=techs,
        endowments={f: 1.0 for f in FACTOR_ORDER},
    )


def flat_economy(sigma: float = 0.4, eta: float = 0.2):
    """Economy whose four nest parameters coincide (collapses to one level)."""
    from ces_race.equilibrium import EconomySpec

    sigmas = (sigma, sigma, sigma, sigma)
    techs = {"goods": make_tech(sigmas), "service": make_tech(sigmas)}
    return EconomySpec(
        eta=eta,
        theta_c={"goods": 0.5, "service": 0.5},
        techs=techs,
        endowments={f: 1.0 for f in FACTOR_ORDER},
    )


def factor_bartik_rows(panel, horizon=5, targets=("Ki", "Lfh", "Lmh", "Lfu", "Lmu")):
    """Shift-share rows for the given targets, concatenated."""
    from ces_race.instruments import bartik

    rows = []
    for target in targets:
        rows.extend(bartik(panel, target, horizon=horizon))
    return rows
