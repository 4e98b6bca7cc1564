"""Four-level nested CES production technology.

A sector combines six factors through a chain of two-input CES nests,
innermost to outermost:

    inner_d = CES(Ki,      Lfh; sigma_fh, theta_fh)
    inner_c = CES(inner_d, Lmh; sigma_mh, theta_mh)
    inner_b = CES(inner_c, Lfu; sigma_fu, theta_fu)
    bundle  = CES(inner_b, Lmu; sigma_mu, theta_mu)
    output  = tfp * Ko**alpha * bundle**(1 - alpha)

where CES(x, z; sigma, theta) = ((1-theta)*x**sigma + theta*z**sigma)**(1/sigma)
and sigma -> 0 is evaluated as the Cobb-Douglas (geometric-mean) limit.

This module evaluates the technology and its marginal products, the
cost-side dual (unit costs, income shares, and the response of income
shares to factor prices), the log-linearization weights used by the
first-difference estimating equations, the five wage-gap equations
themselves, and the shallower one/two/three-level variants used by the
specification ladder.

All nest-level helpers accept numpy arrays and broadcast; evaluation is
carried out in log space throughout so that extreme input ratios and
substitution parameters far below zero do not overflow.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Mapping

import numpy as np

from .errors import SchemaError
from .factors import FACTOR_ORDER, NEST_FACTOR, NEST_ORDER, FactorKey

if TYPE_CHECKING:  # pragma: no cover - import for type checkers only
    from .panel import PanelObservation

# |sigma| below this threshold is evaluated on the Cobb-Douglas branch.
COBB_DOUGLAS_EPS = 1e-9

_GAP_KEYS = ("mh/fh", "mu/fu", "mh/mu", "fh/fu", "fh/ri")


# ---------------------------------------------------------------------------
# Two-input nest primitives (quantity side and cost side)
# ---------------------------------------------------------------------------


def nest_quantity(x, z, sigma: float, theta: float):
    """CES aggregate of inputs ``x`` and ``z`` with weight ``theta`` on ``z``.

    Accepts any ``sigma`` (``sigma == 1`` gives the linear aggregate,
    ``|sigma| < COBB_DOUGLAS_EPS`` the geometric mean).  Inputs must be
    strictly positive.
    """
    log_x = np.log(np.asarray(x, dtype=float))
    log_z = np.log(np.asarray(z, dtype=float))
    if abs(sigma) < COBB_DOUGLAS_EPS:
        return np.exp((1.0 - theta) * log_x + theta * log_z)
    a = np.log1p(-theta) + sigma * log_x
    b = np.log(theta) + sigma * log_z
    return np.exp(np.logaddexp(a, b) / sigma)


def nest_cost(price_x, price_z, sigma: float, theta: float):
    """Unit cost of one nest-aggregate unit at child prices.

    Dual of :func:`nest_quantity` for ``sigma < 1``; the exponent
    ``s = 1/(1-sigma)`` is the within-nest substitution elasticity.
    """
    log_px = np.log(np.asarray(price_x, dtype=float))
    log_pz = np.log(np.asarray(price_z, dtype=float))
    if abs(sigma) < COBB_DOUGLAS_EPS:
        return np.exp(
            (1.0 - theta) * (log_px - np.log1p(-theta))
            + theta * (log_pz - np.log(theta))
        )
    s = 1.0 / (1.0 - sigma)
    a = s * np.log1p(-theta) + (1.0 - s) * log_px
    b = s * np.log(theta) + (1.0 - s) * log_pz
    return np.exp(np.logaddexp(a, b) / (1.0 - s))


def nest_cost_share(price_z, cost, sigma: float, theta: float, weight: float | None = None):
    """Cost share of the ``z`` child within its nest, at child price and nest cost.

    ``weight`` defaults to ``theta``; passing ``1 - theta`` with the sibling's
    price yields the sibling's share directly (multiplicatively, so tiny
    complements keep full relative precision instead of cancelling in
    ``1 - share``).
    """
    weight = theta if weight is None else weight
    if abs(sigma) < COBB_DOUGLAS_EPS:
        shape = np.broadcast_shapes(np.shape(price_z), np.shape(cost))
        return np.full(shape, float(weight)) if shape else float(weight)
    s = 1.0 / (1.0 - sigma)
    log_pz = np.log(np.asarray(price_z, dtype=float))
    log_c = np.log(np.asarray(cost, dtype=float))
    return np.exp(s * np.log(weight) + (1.0 - s) * (log_pz - log_c))


def nest_quantity_share(z, aggregate, sigma: float, theta: float, weight: float | None = None):
    """Value share of the ``z`` child within its nest when inputs are paid
    their within-nest marginal products: theta * (z/aggregate)**sigma.

    ``weight`` defaults to ``theta``; as in :func:`nest_cost_share`, the
    sibling's share is available directly via ``weight = 1 - theta``.
    """
    weight = theta if weight is None else weight
    if abs(sigma) < COBB_DOUGLAS_EPS:
        shape = np.broadcast_shapes(np.shape(z), np.shape(aggregate))
        return np.full(shape, float(weight)) if shape else float(weight)
    log_z = np.log(np.asarray(z, dtype=float))
    log_g = np.log(np.asarray(aggregate, dtype=float))
    return np.exp(np.log(weight) + sigma * (log_z - log_g))


# ---------------------------------------------------------------------------
# Technology parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SectorTechnology:
    """Parameters of one sector's four-level technology.

    ``alpha`` is the outer Cobb-Douglas exponent on non-ICT capital; a value
    of exactly 0 (no outer capital) is accepted for degenerate test
    economies.  All nest weights lie strictly inside (0, 1) and all
    substitution parameters strictly below 1.
    """

    tfp: float
    alpha: float
    theta_fh: float
    theta_mh: float
    theta_fu: float
    theta_mu: float
    sigma_fh: float
    sigma_mh: float
    sigma_fu: float
    sigma_mu: float

    def __post_init__(self) -> None:
        for name in self.__dataclass_fields__:
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.tfp > 0.0):
            raise ValueError(f"tfp must be positive, got {self.tfp}")
        if not (0.0 <= self.alpha < 1.0):
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        for tag in NEST_ORDER:
            theta = getattr(self, f"theta_{tag}")
            sigma = getattr(self, f"sigma_{tag}")
            if not (0.0 < theta < 1.0):
                raise ValueError(f"theta_{tag} must lie in (0, 1), got {theta}")
            if not (sigma < 1.0):
                raise ValueError(f"sigma_{tag} must be below 1, got {sigma}")

    def sigma(self, tag: str) -> float:
        return float(getattr(self, f"sigma_{tag}"))

    def theta(self, tag: str) -> float:
        return float(getattr(self, f"theta_{tag}"))

    @property
    def sigmas(self) -> tuple[float, float, float, float]:
        return (self.sigma_fh, self.sigma_mh, self.sigma_fu, self.sigma_mu)

    @property
    def thetas(self) -> tuple[float, float, float, float]:
        return (self.theta_fh, self.theta_mh, self.theta_fu, self.theta_mu)

    def to_config(self, prefix: str = "") -> dict[str, float]:
        """Flatten to config-file keys (``prefix`` e.g. ``'tech.goods.'``)."""
        out = {f"{prefix}tfp": self.tfp, f"{prefix}alpha": self.alpha}
        for tag in NEST_ORDER:
            out[f"{prefix}theta_{tag}"] = getattr(self, f"theta_{tag}")
            out[f"{prefix}sigma_{tag}"] = getattr(self, f"sigma_{tag}")
        return out

    @classmethod
    def from_config(cls, cfg: Mapping[str, float], prefix: str = "") -> "SectorTechnology":
        kwargs = {"tfp": float(cfg[f"{prefix}tfp"]), "alpha": float(cfg[f"{prefix}alpha"])}
        for tag in NEST_ORDER:
            kwargs[f"theta_{tag}"] = float(cfg[f"{prefix}theta_{tag}"])
            kwargs[f"sigma_{tag}"] = float(cfg[f"{prefix}sigma_{tag}"])
        return cls(**kwargs)


def flat_weights_to_nested(weights: Mapping[FactorKey, float]) -> dict[str, float]:
    """Convert one-level CES weights over (Ki, Lfh, Lmh, Lfu, Lmu) into the
    equivalent nest weights of a four-level technology whose four
    substitution parameters are all equal.

    The weights must be positive and sum to 1.  The returned mapping holds
    ``theta_fh`` .. ``theta_mu``.  A four-level technology built with these
    weights and a common sigma reproduces the one-level aggregate exactly.
    """
    total = sum(weights[f] for f in weights)
    if abs(total - 1.0) > 1e-12:
        raise ValueError(f"flat weights must sum to 1, got {total}")
    a_mu = weights[FactorKey.Lmu]
    a_fu = weights[FactorKey.Lfu]
    a_mh = weights[FactorKey.Lmh]
    a_fh = weights[FactorKey.Lfh]
    theta_mu = a_mu
    theta_fu = a_fu / (1.0 - a_mu)
    theta_mh = a_mh / (1.0 - a_mu - a_fu)
    theta_fh = a_fh / (1.0 - a_mu - a_fu - a_mh)
    return {
        "theta_fh": theta_fh,
        "theta_mh": theta_mh,
        "theta_fu": theta_fu,
        "theta_mu": theta_mu,
    }


# ---------------------------------------------------------------------------
# Quantity-side evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NestValues:
    """Aggregate quantities of the three inner nests and final output.

    Shallower variants leave the nests they do not build as ``None``.
    """

    nest_d: float | None
    nest_c: float | None
    nest_b: float | None
    output: float


def _quantities_array(inputs: Mapping[FactorKey, float]) -> np.ndarray:
    values = np.empty(6, dtype=float)
    for f in FACTOR_ORDER:
        try:
            values[f] = float(inputs[f])
        except KeyError:
            raise ValueError(f"missing input quantity for factor {f.name}") from None
    if not np.all(values > 0.0) or not np.all(np.isfinite(values)):
        bad = [f.name for f in FACTOR_ORDER if not (values[f] > 0.0 and np.isfinite(values[f]))]
        raise ValueError(f"input quantities must be positive and finite; offending: {bad}")
    return values


def nest_chain_quantities(tech: SectorTechnology, quantities) -> dict[str, np.ndarray]:
    """Vectorized nest chain: ``quantities`` has shape (..., 6) in factor order.

    Returns arrays for the four nest aggregates and output under keys
    ``"D", "C", "B", "M", "y"``.
    """
    q = np.asarray(quantities, dtype=float)
    nest_d = nest_quantity(q[..., FactorKey.Ki], q[..., FactorKey.Lfh], tech.sigma_fh, tech.theta_fh)
    nest_c = nest_quantity(nest_d, q[..., FactorKey.Lmh], tech.sigma_mh, tech.theta_mh)
    nest_b = nest_quantity(nest_c, q[..., FactorKey.Lfu], tech.sigma_fu, tech.theta_fu)
    bundle = nest_quantity(nest_b, q[..., FactorKey.Lmu], tech.sigma_mu, tech.theta_mu)
    log_y = np.log(tech.tfp) + (1.0 - tech.alpha) * np.log(bundle)
    if tech.alpha > 0.0:
        log_y = log_y + tech.alpha * np.log(q[..., FactorKey.Ko])
    return {"D": nest_d, "C": nest_c, "B": nest_b, "M": bundle, "y": np.exp(log_y)}


def eval_nests(tech: SectorTechnology, inputs: Mapping[FactorKey, float]) -> NestValues:
    """Evaluate the four-level technology at strictly positive inputs."""
    q = _quantities_array(inputs)
    chain = nest_chain_quantities(tech, q)
    return NestValues(
        nest_d=float(chain["D"]),
        nest_c=float(chain["C"]),
        nest_b=float(chain["B"]),
        output=float(chain["y"]),
    )


def quantity_income_shares(tech: SectorTechnology, quantities) -> np.ndarray:
    """Factor income shares when each factor is paid its marginal product.

    ``quantities`` has shape (..., 6); the result has shape (..., 6) and sums
    to 1 along the last axis by construction.
    """
    q = np.asarray(quantities, dtype=float)
    chain = nest_chain_quantities(tech, q)
    share_fh = nest_quantity_share(q[..., FactorKey.Lfh], chain["D"], tech.sigma_fh, tech.theta_fh)
    share_mh = nest_quantity_share(q[..., FactorKey.Lmh], chain["C"], tech.sigma_mh, tech.theta_mh)
    share_fu = nest_quantity_share(q[..., FactorKey.Lfu], chain["B"], tech.sigma_fu, tech.theta_fu)
    share_mu = nest_quantity_share(q[..., FactorKey.Lmu], chain["M"], tech.sigma_mu, tech.theta_mu)
    # complements computed from their own closed forms (not 1 - share) so
    # that deep-chain products keep full relative precision
    comp_fh = nest_quantity_share(
        q[..., FactorKey.Ki], chain["D"], tech.sigma_fh, tech.theta_fh, weight=1.0 - tech.theta_fh
    )
    comp_mh = nest_quantity_share(
        chain["D"], chain["C"], tech.sigma_mh, tech.theta_mh, weight=1.0 - tech.theta_mh
    )
    comp_fu = nest_quantity_share(
        chain["C"], chain["B"], tech.sigma_fu, tech.theta_fu, weight=1.0 - tech.theta_fu
    )
    comp_mu = nest_quantity_share(
        chain["B"], chain["M"], tech.sigma_mu, tech.theta_mu, weight=1.0 - tech.theta_mu
    )
    lam = np.empty(np.shape(q), dtype=float)
    rest = 1.0 - tech.alpha
    lam[..., FactorKey.Ko] = tech.alpha
    lam[..., FactorKey.Lmu] = rest * share_mu
    lam[..., FactorKey.Lfu] = rest * comp_mu * share_fu
    lam[..., FactorKey.Lmh] = rest * comp_mu * comp_fu * share_mh
    lam[..., FactorKey.Lfh] = rest * comp_mu * comp_fu * comp_mh * share_fh
    lam[..., FactorKey.Ki] = rest * comp_mu * comp_fu * comp_mh * comp_fh
    return lam


def marginal_products(
    tech: SectorTechnology, inputs: Mapping[FactorKey, float]
) -> dict[FactorKey, float]:
    """Analytic marginal products of all six factors.

    Computed through the within-nest share chain, so the Euler identity
    sum_f MP_f * x_f = output holds to machine precision.  ``alpha == 0``
    yields a zero marginal product for outer capital.
    """
    q = _quantities_array(inputs)
    lam = quantity_income_shares(tech, q)
    y = float(nest_chain_quantities(tech, q)["y"])
    return {f: float(lam[f] * y / q[f]) for f in FACTOR_ORDER}


# ---------------------------------------------------------------------------
# Cost-side evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostStructure:
    """Cost-side dual of the technology at given factor prices.

    ``unit_cost``      cost of one unit of sector output (includes 1/tfp)
    ``income_shares``  factor cost shares, shape (..., 6)
    ``nest_costs``     unit costs of the inner aggregates, keys "D","C","B","M"
    ``within_shares``  within-nest cost share of the labor child of each nest,
                       in nest order (fh, mh, fu, mu), shape (..., 4)
    """

    unit_cost: np.ndarray
    income_shares: np.ndarray
    nest_costs: dict[str, np.ndarray]
    within_shares: np.ndarray


def cost_structure(tech: SectorTechnology, prices, tfp=None) -> CostStructure:
    """Evaluate unit cost and cost shares at factor prices of shape (..., 6).

    ``tfp`` optionally overrides the technology's scalar TFP with an array
    broadcastable against the leading shape (used for cell-varying TFP).
    """
    w = np.asarray(prices, dtype=float)
    cost_d = nest_cost(w[..., FactorKey.Ki], w[..., FactorKey.Lfh], tech.sigma_fh, tech.theta_fh)
    cost_c = nest_cost(cost_d, w[..., FactorKey.Lmh], tech.sigma_mh, tech.theta_mh)
    cost_b = nest_cost(cost_c, w[..., FactorKey.Lfu], tech.sigma_fu, tech.theta_fu)
    cost_m = nest_cost(cost_b, w[..., FactorKey.Lmu], tech.sigma_mu, tech.theta_mu)
    scale = np.log(tech.tfp if tfp is None else np.asarray(tfp, dtype=float))
    alpha = tech.alpha
    if alpha > 0.0:
        log_unit = (
            alpha * (np.log(w[..., FactorKey.Ko]) - np.log(alpha))
            + (1.0 - alpha) * (np.log(cost_m) - np.log1p(-alpha))
            - scale
        )
    else:
        log_unit = np.log(cost_m) - scale
    unit_cost = np.exp(log_unit)

    share_fh = nest_cost_share(w[..., FactorKey.Lfh], cost_d, tech.sigma_fh, tech.theta_fh)
    share_mh = nest_cost_share(w[..., FactorKey.Lmh], cost_c, tech.sigma_mh, tech.theta_mh)
    share_fu = nest_cost_share(w[..., FactorKey.Lfu], cost_b, tech.sigma_fu, tech.theta_fu)
    share_mu = nest_cost_share(w[..., FactorKey.Lmu], cost_m, tech.sigma_mu, tech.theta_mu)
    # complements from their own closed forms, as in quantity_income_shares
    comp_fh = nest_cost_share(
        w[..., FactorKey.Ki], cost_d, tech.sigma_fh, tech.theta_fh, weight=1.0 - tech.theta_fh
    )
    comp_mh = nest_cost_share(
        cost_d, cost_c, tech.sigma_mh, tech.theta_mh, weight=1.0 - tech.theta_mh
    )
    comp_fu = nest_cost_share(
        cost_c, cost_b, tech.sigma_fu, tech.theta_fu, weight=1.0 - tech.theta_fu
    )
    comp_mu = nest_cost_share(
        cost_b, cost_m, tech.sigma_mu, tech.theta_mu, weight=1.0 - tech.theta_mu
    )

    lam = np.empty(np.shape(w), dtype=float)
    rest = 1.0 - alpha
    lam[..., FactorKey.Ko] = alpha
    lam[..., FactorKey.Lmu] = rest * share_mu
    lam[..., FactorKey.Lfu] = rest * comp_mu * share_fu
    lam[..., FactorKey.Lmh] = rest * comp_mu * comp_fu * share_mh
    lam[..., FactorKey.Lfh] = rest * comp_mu * comp_fu * comp_mh * share_fh
    lam[..., FactorKey.Ki] = rest * comp_mu * comp_fu * comp_mh * comp_fh
    within = np.stack(
        [np.broadcast_to(s, np.shape(w)[:-1]) for s in (share_fh, share_mh, share_fu, share_mu)],
        axis=-1,
    ).astype(float)
    return CostStructure(
        unit_cost=unit_cost,
        income_shares=lam,
        nest_costs={"D": cost_d, "C": cost_c, "B": cost_b, "M": cost_m},
        within_shares=within,
    )


def share_derivative_matrix(income_shares, sigmas) -> np.ndarray:
    """Log-derivatives of sector income shares with respect to factor prices.

    ``income_shares`` has shape (..., 6) (positive, summing to 1 on the last
    axis); ``sigmas`` is the 4-tuple of nest substitution parameters in nest
    order.  Returns ``d`` of shape (..., 6, 6) with
    ``d[..., f, g] = d ln(share_f) / d ln(price_g)``.

    The derivation walks the nest tree: the log-derivative of a nest's unit
    cost with respect to a leaf price equals the leaf's income share within
    the nest's subtree (Shephard), and the within-nest share of a child
    responds to prices with factor ``-sigma/(1-sigma)`` times the gap between
    the child's and the nest's cost derivatives.  The outermost Cobb-Douglas
    layer contributes nothing, so the row and column for outer capital are
    identically zero.  Rows sum to zero (shares are homogeneous of degree
    zero in prices).
    """
    lam = np.asarray(income_shares, dtype=float)
    sig = [float(s) for s in sigmas]
    t = [-(s / (1.0 - s)) for s in sig]  # t_fh, t_mh, t_fu, t_mu
    shape = lam.shape[:-1]

    s_d = lam[..., FactorKey.Ki] + lam[..., FactorKey.Lfh]
    s_c = s_d + lam[..., FactorKey.Lmh]
    s_b = s_c + lam[..., FactorKey.Lfu]
    s_m = s_b + lam[..., FactorKey.Lmu]

    def _node_deriv(members: Iterable[FactorKey], total) -> np.ndarray:
        out = np.zeros(shape + (6,), dtype=float)
        for f in members:
            out[..., f] = lam[..., f] / total
        return out

    delta_d = _node_deriv((FactorKey.Ki, FactorKey.Lfh), s_d)
    delta_c = _node_deriv((FactorKey.Ki, FactorKey.Lfh, FactorKey.Lmh), s_c)
    delta_b = _node_deriv(
        (FactorKey.Ki, FactorKey.Lfh, FactorKey.Lmh, FactorKey.Lfu), s_b
    )
    delta_m = _node_deriv(
        (FactorKey.Ki, FactorKey.Lfh, FactorKey.Lmh, FactorKey.Lfu, FactorKey.Lmu), s_m
    )

    def _leaf(f: FactorKey) -> np.ndarray:
        out = np.zeros(shape + (6,), dtype=float)
        out[..., f] = 1.0
        return out

    tail_b = t[3] * (delta_b - delta_m)
    tail_c = t[2] * (delta_c - delta_b) + tail_b
    tail_d = t[1] * (delta_d - delta_c) + tail_c

    d = np.zeros(shape + (6, 6), dtype=float)
    d[..., FactorKey.Ki, :] = t[0] * (_leaf(FactorKey.Ki) - delta_d) + tail_d
    d[..., FactorKey.Lfh, :] = t[0] * (_leaf(FactorKey.Lfh) - delta_d) + tail_d
    d[..., FactorKey.Lmh, :] = t[1] * (_leaf(FactorKey.Lmh) - delta_c) + tail_c
    d[..., FactorKey.Lfu, :] = t[2] * (_leaf(FactorKey.Lfu) - delta_b) + tail_b
    d[..., FactorKey.Lmu, :] = t[3] * (_leaf(FactorKey.Lmu) - delta_m)
    # Row and column FactorKey.Ko stay zero: the outer layer is Cobb-Douglas.
    return d


# ---------------------------------------------------------------------------
# Log-linearization weights and first-difference equations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GammaWeights:
    """Wage-bill weights of the inner nests, averaged over a sample run.

    ``gamma_fh``: share of female-skilled labor in the innermost nest's bill;
    ``gamma_mh``: share of male-skilled labor in the bill up through its nest;
    ``gamma_fu``: share of female-unskilled labor up through its nest.

    Weights built from strictly positive wage bills always lie strictly
    inside (0, 1); the boundary values are accepted so that degenerate
    linearizations (a nest collapsing onto one child) remain expressible.
    """

    gamma_fh: float
    gamma_mh: float
    gamma_fu: float

    def __post_init__(self) -> None:
        for name in ("gamma_fh", "gamma_mh", "gamma_fu"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


def gamma_weights_from_bills(
    bill_ki, bill_fh, bill_mh, bill_fu
) -> GammaWeights:
    """Gamma weights from per-period wage-bill series (means of period ratios)."""
    ki = np.asarray(bill_ki, dtype=float)
    fh = np.asarray(bill_fh, dtype=float)
    mh = np.asarray(bill_mh, dtype=float)
    fu = np.asarray(bill_fu, dtype=float)
    if np.any(ki <= 0) or np.any(fh <= 0) or np.any(mh <= 0) or np.any(fu <= 0):
        raise ValueError("wage bills must be strictly positive")
    g_fh = fh / (ki + fh)
    g_mh = mh / (ki + fh + mh)
    g_fu = fu / (ki + fh + mh + fu)
    return GammaWeights(
        gamma_fh=float(np.mean(g_fh)),
        gamma_mh=float(np.mean(g_mh)),
        gamma_fu=float(np.mean(g_fu)),
    )


def gamma_weights(obs_run: Iterable["PanelObservation"]) -> GammaWeights:
    """Gamma weights for one country-sector run of panel observations.

    Observations are grouped by year (industry detail is summed within each
    year) before the period ratios are formed; the weights are the time means
    of those ratios.
    """
    by_year: dict[int, dict[str, float]] = {}
    for obs in obs_run:
        bills = by_year.setdefault(obs.year, {"ki": 0.0, "fh": 0.0, "mh": 0.0, "fu": 0.0})
        bills["ki"] += obs.factor_price[FactorKey.Ki] * obs.factor_quantity[FactorKey.Ki]
        bills["fh"] += obs.factor_price[FactorKey.Lfh] * obs.factor_quantity[FactorKey.Lfh]
        bills["mh"] += obs.factor_price[FactorKey.Lmh] * obs.factor_quantity[FactorKey.Lmh]
        bills["fu"] += obs.factor_price[FactorKey.Lfu] * obs.factor_quantity[FactorKey.Lfu]
    if not by_year:
        raise ValueError("empty observation run")
    years = sorted(by_year)
    return gamma_weights_from_bills(
        [by_year[t]["ki"] for t in years],
        [by_year[t]["fh"] for t in years],
        [by_year[t]["mh"] for t in years],
        [by_year[t]["fu"] for t in years],
    )


def loglin_deltas(
    gammas: GammaWeights, dln_inputs: Mapping[FactorKey, float]
) -> dict[str, float]:
    """Log changes of the inner aggregates implied by factor log changes.

    Linearizes each nest with the fixed gamma weights:
    dln D = (1-gamma_fh) dln Ki + gamma_fh dln Lfh, then chains C and B.
    """
    d_ki = float(dln_inputs[FactorKey.Ki])
    d_fh = float(dln_inputs[FactorKey.Lfh])
    d_mh = float(dln_inputs[FactorKey.Lmh])
    d_fu = float(dln_inputs[FactorKey.Lfu])
    d_nest_d = (1.0 - gammas.gamma_fh) * d_ki + gammas.gamma_fh * d_fh
    d_nest_c = (1.0 - gammas.gamma_mh) * d_nest_d + gammas.gamma_mh * d_mh
    d_nest_b = (1.0 - gammas.gamma_fu) * d_nest_c + gammas.gamma_fu * d_fu
    return {"D": d_nest_d, "C": d_nest_c, "B": d_nest_b}


def wage_gap_deltas(
    tech: SectorTechnology,
    dln_inputs: Mapping[FactorKey, float],
    gammas: GammaWeights,
) -> dict[str, float]:
    """Predicted log changes of the five relative-price gaps.

    Keys: ``"mh/fh"`` (male/female skilled wages), ``"mu/fu"`` (male/female
    unskilled), ``"mh/mu"`` (skilled/unskilled male), ``"fh/fu"``
    (skilled/unskilled female), ``"fh/ri"`` (female-skilled wage over the ICT
    rental price).  Aggregate changes use the gamma-linearized nests, so the
    predictions match exact marginal-product ratios to first order.
    """
    agg = loglin_deltas(gammas, dln_inputs)
    d_d, d_c, d_b = agg["D"], agg["C"], agg["B"]
    d_ki = float(dln_inputs[FactorKey.Ki])
    d_fh = float(dln_inputs[FactorKey.Lfh])
    d_mh = float(dln_inputs[FactorKey.Lmh])
    d_fu = float(dln_inputs[FactorKey.Lfu])
    d_mu = float(dln_inputs[FactorKey.Lmu])
    b_fh = 1.0 - tech.sigma_fh
    b_mh = 1.0 - tech.sigma_mh
    b_fu = 1.0 - tech.sigma_fu
    b_mu = 1.0 - tech.sigma_mu
    return {
        "mh/fh": b_mh * (d_d - d_mh) - b_fh * (d_d - d_fh),
        "mu/fu": b_mu * (d_b - d_mu) - b_fu * (d_b - d_fu),
        "mh/mu": b_mh * (d_c - d_mh) - b_mu * (d_b - d_mu) + b_fu * (d_b - d_c),
        "fh/fu": b_fh * (d_d - d_fh) - b_fu * (d_c - d_fu) + b_mh * (d_c - d_d),
        "fh/ri": b_fh * (d_ki - d_fh),
    }


# ---------------------------------------------------------------------------
# Shallower variants (specification ladder)
# ---------------------------------------------------------------------------

_VARIANT_OUTER_KEYS = {
    "one": ("Ki", "Lfh", "Lmh", "Lfu", "Lmu"),
    "two": ("D", "Lmh", "Lfu", "Lmu"),
    "three": ("C", "Lfu", "Lmu"),
}


@dataclass(frozen=True)
class VariantTechnology:
    """Parameters of a one-, two-, or three-level variant technology.

    The outer layer is a flat CES over ``outer_theta``'s keys with parameter
    ``outer_sigma``; retained inner nests carry their own sigma/theta.  The
    keys must match the level: one-level lists all five inner factors,
    two-level replaces (Ki, Lfh) with the bundle key ``"D"``, three-level
    additionally folds Lmh into ``"C"``.
    """

    level: str
    tfp: float
    alpha: float
    outer_sigma: float
    outer_theta: Mapping[str, float]
    sigma_fh: float | None = None
    theta_fh: float | None = None
    sigma_mh: float | None = None
    theta_mh: float | None = None

    def __post_init__(self) -> None:
        if self.level not in _VARIANT_OUTER_KEYS:
            raise ValueError(f"unknown variant level {self.level!r}")
        expected = set(_VARIANT_OUTER_KEYS[self.level])
        got = set(self.outer_theta)
        if got != expected:
            raise ValueError(
                f"{self.level}-level variant needs outer weights for {sorted(expected)}, got {sorted(got)}"
            )
        if not (self.tfp > 0.0):
            raise ValueError("tfp must be positive")
        if not (0.0 <= self.alpha < 1.0):
            raise ValueError("alpha must lie in [0, 1)")
        if not (self.outer_sigma < 1.0):
            raise ValueError("outer_sigma must be below 1")
        for key, value in self.outer_theta.items():
            if not (value > 0.0):
                raise ValueError(f"outer weight for {key} must be positive")
        if abs(self.outer_sigma) < COBB_DOUGLAS_EPS:
            total = sum(self.outer_theta.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError("Cobb-Douglas outer layer requires weights summing to 1")
        if self.level in ("two", "three") and (self.sigma_fh is None or self.theta_fh is None):
            raise ValueError(f"{self.level}-level variant requires sigma_fh and theta_fh")
        if self.level == "three" and (self.sigma_mh is None or self.theta_mh is None):
            raise ValueError("three-level variant requires sigma_mh and theta_mh")


def _flat_ces(values: Mapping[str, float], thetas: Mapping[str, float], sigma: float) -> float:
    logs = {k: np.log(float(values[k])) for k in thetas}
    if abs(sigma) < COBB_DOUGLAS_EPS:
        return float(np.exp(sum(thetas[k] * logs[k] for k in thetas)))
    terms = np.array([np.log(thetas[k]) + sigma * logs[k] for k in thetas])
    return float(np.exp(np.logaddexp.reduce(terms) / sigma))


def eval_variant(
    level: str, params: VariantTechnology | SectorTechnology, inputs: Mapping[FactorKey, float]
) -> NestValues:
    """Evaluate a one/two/three-level variant; ``level == "four"`` delegates
    to :func:`eval_nests` (``params`` must then be a :class:`SectorTechnology`)."""
    if level == "four":
        if not isinstance(params, SectorTechnology):
            raise ValueError("four-level evaluation requires SectorTechnology parameters")
        return eval_nests(params, inputs)
    if not isinstance(params, VariantTechnology) or params.level != level:
        raise ValueError(f"params do not describe a {level}-level technology")
    q = _quantities_array(inputs)

    nest_d = nest_c = None
    values: dict[str, float] = {}
    if level == "one":
        for key in _VARIANT_OUTER_KEYS["one"]:
            values[key] = float(q[FactorKey[key]])
    else:
        nest_d = float(
            nest_quantity(q[FactorKey.Ki], q[FactorKey.Lfh], params.sigma_fh, params.theta_fh)
        )
        if level == "two":
            values["D"] = nest_d
            for key in ("Lmh", "Lfu", "Lmu"):
                values[key] = float(q[FactorKey[key]])
        else:
            nest_c = float(
                nest_quantity(nest_d, q[FactorKey.Lmh], params.sigma_mh, params.theta_mh)
            )
            values["C"] = nest_c
            for key in ("Lfu", "Lmu"):
                values[key] = float(q[FactorKey[key]])
    bundle = _flat_ces(values, dict(params.outer_theta), params.outer_sigma)
    log_y = np.log(params.tfp) + (1.0 - params.alpha) * np.log(bundle)
    if params.alpha > 0.0:
        log_y = log_y + params.alpha * np.log(q[FactorKey.Ko])
    return NestValues(nest_d=nest_d, nest_c=nest_c, nest_b=None, output=float(np.exp(log_y)))
