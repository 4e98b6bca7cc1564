"""Two-sector competitive equilibrium: solver, elasticity oracles, panels.

The economy has a representative consumer with CES preferences over the
sector outputs (substitution parameter ``eta`` < 1) who supplies fixed factor
endowments, and one four-level nested CES technology per sector operated
under perfect competition.  An equilibrium is a price system and allocation
where producers price at unit cost, the consumer spends all factor income,
and goods and factor markets clear.  The aggregate consumption price index is
the numeraire (fixed at 1), so factor prices come out already deflated.

The solver is a damped Newton iteration on log factor prices applied to log
excess factor demands.  Because prices and allocations are parameterized in
logs, every iterate is strictly positive by construction.  Distinct economies
(e.g. country-year cells of a synthetic panel) are solved as one batched
system of independent Newton problems.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .aggregate import EconomyPoint
from .ces import (
    COBB_DOUGLAS_EPS,
    SectorTechnology,
    cost_structure,
    gamma_weights_from_bills,
    share_derivative_matrix,
)
from .errors import EstimationError, InvariantError, SchemaError
from .factors import FACTOR_ORDER, FactorKey, SECTORS, parse_factor
from .panel import Panel, PanelObservation

__all__ = [
    "EconomySpec",
    "EquilibriumState",
    "ShockConfig",
    "solve",
    "aggregate_production_oracle",
    "aggregate_cost_oracle",
    "synth_panel",
]

logger = logging.getLogger(__name__)

STATE_TOL = 1e-10
SOLVER_TOL = 1e-12
MAX_ITERATIONS = 200
INNER_FACTORS: tuple[FactorKey, ...] = tuple(
    f for f in FACTOR_ORDER if f is not FactorKey.Ko
)

DEFAULT_ENDOWMENT_TRENDS: Mapping[FactorKey, float] = {
    FactorKey.Ki: 0.05,
    FactorKey.Lfh: 0.03,
    FactorKey.Lmh: 0.01,
    FactorKey.Lfu: 0.02,
    FactorKey.Lmu: 0.0,
    FactorKey.Ko: 0.03,
}
DEFAULT_TFP_TRENDS: Mapping[str, float] = {"goods": 0.01, "service": 0.005}
DEFAULT_INDUSTRY_DRIFTS: Mapping[str, tuple[float, ...]] = {
    "goods": (-0.03, 0.0, 0.03),
    "service": (-0.02, 0.0, 0.02),
}


@dataclass(frozen=True)
class EconomySpec:
    """Primitives of the economy: preferences, technologies, endowments.

    ``theta_c`` holds one demand weight per sector, each in (0, 1); the
    weights need not sum to one (they are normalized internally).  Outer
    capital must be endowed exactly when some sector uses it (positive outer
    exponent); economies in which no sector demands outer capital omit it
    from the endowment map and from all equilibrium objects.
    """

    eta: float
    theta_c: Mapping[str, float]
    techs: Mapping[str, SectorTechnology]
    endowments: Mapping[FactorKey, float]

    def __post_init__(self) -> None:
        if not (math.isfinite(self.eta) and self.eta < 1.0):
            raise SchemaError(f"consumption substitution parameter must be < 1, got {self.eta}")
        sectors = tuple(sorted(self.theta_c))
        if not sectors:
            raise SchemaError("at least one sector is required")
        if tuple(sorted(self.techs)) != sectors:
            raise SchemaError(
                f"technology sectors {sorted(self.techs)} do not match demand sectors {list(sectors)}"
            )
        for name in sectors:
            weight = float(self.theta_c[name])
            if not (0.0 < weight < 1.0):
                raise SchemaError(f"demand weight for sector {name!r} must lie in (0, 1), got {weight}")
        needs_outer = any(self.techs[name].alpha > 0.0 for name in sectors)
        required = list(INNER_FACTORS) + ([FactorKey.Ko] if needs_outer else [])
        for f in required:
            value = self.endowments.get(f)
            if value is None:
                raise SchemaError(f"missing endowment for factor {f.name}")
            if not (math.isfinite(value) and value > 0.0):
                raise SchemaError(f"endowment for {f.name} must be positive, got {value}")
        if not needs_outer and FactorKey.Ko in self.endowments:
            raise SchemaError(
                "outer capital is endowed but no sector demands it "
                "(all outer exponents are zero)"
            )
        for f in self.endowments:
            if f not in FACTOR_ORDER:
                raise SchemaError(f"unknown endowment key {f!r}")
        object.__setattr__(self, "theta_c", {n: float(self.theta_c[n]) for n in sectors})
        object.__setattr__(self, "techs", {n: self.techs[n] for n in sectors})
        object.__setattr__(
            self,
            "endowments",
            {f: float(self.endowments[f]) for f in FACTOR_ORDER if f in self.endowments},
        )

    @property
    def sectors(self) -> tuple[str, ...]:
        return tuple(self.theta_c)

    @property
    def factors(self) -> tuple[FactorKey, ...]:
        return tuple(self.endowments)

    def demand_weights(self) -> np.ndarray:
        """Demand weights normalized to sum to one, in sector order."""
        raw = np.array([self.theta_c[n] for n in self.sectors], dtype=float)
        return raw / raw.sum()

    def to_config(self) -> dict:
        return {
            "eta": self.eta,
            "sectors": {
                name: {"theta_c": self.theta_c[name], **self.techs[name].to_config()}
                for name in self.sectors
            },
            "endowments": {f.name: self.endowments[f] for f in self.endowments},
        }

    @classmethod
    def from_config(cls, cfg: Mapping) -> "EconomySpec":
        try:
            sectors = cfg["sectors"]
            eta = float(cfg["eta"])
            endow_cfg = cfg["endowments"]
        except KeyError as exc:
            raise SchemaError(f"economy config is missing section {exc.args[0]!r}") from exc
        theta_c = {}
        techs = {}
        for name, table in sectors.items():
            if "theta_c" not in table:
                raise SchemaError(f"sector {name!r} config is missing 'theta_c'")
            theta_c[name] = float(table["theta_c"])
            techs[name] = SectorTechnology.from_config(
                {k: v for k, v in table.items() if k != "theta_c"}
            )
        endowments = {parse_factor(name): float(v) for name, v in endow_cfg.items()}
        return cls(eta=eta, theta_c=theta_c, techs=techs, endowments=endowments)


def _logsumexp(values: np.ndarray, axis: int = -1) -> np.ndarray:
    peak = np.max(values, axis=axis, keepdims=True)
    return np.squeeze(peak, axis=axis) + np.log(
        np.sum(np.exp(values - peak), axis=axis)
    )


def _consumer_shares(eta: float, ln_weights: np.ndarray, ln_prices: np.ndarray):
    """Expenditure shares and log price index of the consumption aggregator.

    ``ln_weights`` are the log normalized demand weights (N,), ``ln_prices``
    the log sector prices (..., N).  Returns ``(shares, ln_index)``.
    """
    if abs(eta) < COBB_DOUGLAS_EPS:
        weights = np.exp(ln_weights)
        shares = np.broadcast_to(weights, ln_prices.shape)
        ln_index = np.sum(weights * (ln_prices - ln_weights), axis=-1)
        return shares, ln_index
    s = 1.0 / (1.0 - eta)
    scores = s * ln_weights + (1.0 - s) * ln_prices
    ln_total = _logsumexp(scores, axis=-1)
    shares = np.exp(scores - ln_total[..., None])
    return shares, ln_total / (1.0 - s)


@dataclass
class _BatchEquilibrium:
    """Array-form solution for a batch of independent economies."""

    sectors: tuple[str, ...]
    active: np.ndarray            # (6,) bool, priced factors
    ln_factor_prices: np.ndarray  # (K, 6); inactive columns are meaningless
    factor_prices: np.ndarray     # (K, 6); NaN in inactive columns
    goods_prices: np.ndarray      # (K, N)
    expenditure_shares: np.ndarray  # (K, N)
    income_shares: np.ndarray     # (K, N, 6)
    outputs: np.ndarray           # (K, N)
    allocations: np.ndarray       # (K, N, 6)
    income: np.ndarray            # (K,)
    price_index: np.ndarray       # (K,)
    iterations: int


def _solve_batch(
    spec: EconomySpec,
    ln_endowments: np.ndarray,
    tfp_by_sector: Mapping[str, np.ndarray] | None = None,
    *,
    tol: float = SOLVER_TOL,
    max_iterations: int = MAX_ITERATIONS,
) -> _BatchEquilibrium:
    """Solve a batch of economies sharing ``spec``'s preferences/technologies.

    ``ln_endowments`` has shape (K, 6); columns of factors absent from the
    spec are ignored.  ``tfp_by_sector`` optionally overrides each sector's
    TFP with per-cell levels of shape (K,).
    """
    sectors = spec.sectors
    techs = [spec.techs[name] for name in sectors]
    weights = spec.demand_weights()
    ln_weights = np.log(weights)
    eta = spec.eta
    b = 0.0 if abs(eta) < COBB_DOUGLAS_EPS else 1.0 - 1.0 / (1.0 - eta)

    active = np.array([f in spec.endowments for f in FACTOR_ORDER])
    pinned = FactorKey.Ko if active[FactorKey.Ko] else FactorKey.Lmu
    free = np.array([int(f) for f in FACTOR_ORDER if active[f] and f is not pinned])

    ln_endow = np.where(active, np.asarray(ln_endowments, dtype=float), 0.0)
    n_cells = ln_endow.shape[0]
    endow = np.where(active, np.exp(ln_endow), 0.0)
    tfps = [
        None if tfp_by_sector is None else np.asarray(tfp_by_sector[name], dtype=float)
        for name in sectors
    ]

    def evaluate(u: np.ndarray, with_jacobian: bool) -> dict:
        w = np.exp(u)
        lam = np.empty((n_cells, len(sectors), 6))
        ln_p = np.empty((n_cells, len(sectors)))
        for j, tech in enumerate(techs):
            cs = cost_structure(tech, w, tfp=tfps[j])
            lam[:, j, :] = cs.income_shares
            ln_p[:, j] = np.log(cs.unit_cost)
        shares, ln_index = _consumer_shares(eta, ln_weights, ln_p)
        money = np.sum(w * endow, axis=1)
        demand_share = np.einsum("kj,kjf->kf", shares, lam)
        # Walras self-check: total demand value must equal income identically.
        drift = np.max(np.abs(np.sum(demand_share, axis=1) - 1.0))
        if np.isfinite(drift) and drift > 1e-8:
            raise InvariantError(
                f"aggregate demand value drifted from income by {drift:.3e}"
            )
        residual = (
            np.log(demand_share[:, free])
            + np.log(money)[:, None]
            - u[:, free]
            - ln_endow[:, free]
        )
        out = {
            "residual": residual,
            "lam": lam,
            "ln_p": ln_p,
            "shares": shares,
            "money": money,
            "demand_share": demand_share,
            "ln_index": ln_index,
            "w": w,
        }
        if with_jacobian:
            supply_share = w * endow / money[:, None]
            acc = np.zeros((n_cells, 6, 6))
            for j, tech in enumerate(techs):
                deriv = share_derivative_matrix(lam[:, j, :], tech.sigmas)
                gap = lam[:, j, None, :] - demand_share[:, None, :]
                acc += shares[:, j, None, None] * lam[:, j, :, None] * (deriv + b * gap)
            acc_free = acc[:, free][:, :, free]
            dln = acc_free / demand_share[:, free, None]
            out["jacobian"] = (
                dln + supply_share[:, None, free] - np.eye(len(free))
            )
        return out

    u = np.zeros((n_cells, 6))
    converged = False
    state = None
    err = None
    iteration = 0
    for iteration in range(max_iterations):
        state = evaluate(u, with_jacobian=True)
        err = np.max(np.abs(state["residual"]), axis=1)
        if np.all(err < tol):
            converged = True
            break
        step = np.linalg.solve(state["jacobian"], -state["residual"][..., None])[..., 0]
        scale = np.ones(n_cells)
        trial = u
        for _ in range(60):
            trial = u.copy()
            trial[:, free] += scale[:, None] * step
            t_err = np.max(np.abs(evaluate(trial, with_jacobian=False)["residual"]), axis=1)
            ok = (t_err <= (1.0 - 1e-4 * scale) * err) | (t_err < tol)
            if np.all(ok):
                break
            scale = np.where(ok, scale, 0.5 * scale)
            if np.min(scale) < 1e-10:
                worst = int(np.argmax(err))
                error = EstimationError(
                    "equilibrium solver stalled: backtracking could not reduce the "
                    f"residual (max-norm {float(np.max(err)):.3e})"
                )
                error.cell = worst
                raise error
        u = trial
    if not converged:
        state = evaluate(u, with_jacobian=False)
        err = np.max(np.abs(state["residual"]), axis=1)
        if not np.all(err < tol):
            worst = int(np.argmax(err))
            error = EstimationError(
                f"equilibrium solver did not converge after {max_iterations} "
                f"iterations; final residual max-norm {float(np.max(err)):.3e}"
            )
            error.cell = worst
            raise error

    # Impose the numeraire: shift all log prices by -ln(price index).
    u = u - state["ln_index"][:, None]
    final = evaluate(u, with_jacobian=False)
    if np.max(np.abs(final["ln_index"])) > 1e-9:
        raise InvariantError("price normalization failed to pin the aggregate index at 1")

    shares = final["shares"]
    money = final["money"]
    prices = np.exp(final["ln_p"])
    outputs = shares * money[:, None] / prices
    w = final["w"]
    allocations = final["lam"] * (shares * money[:, None])[:, :, None] / w[:, None, :]
    factor_prices = np.where(active, w, np.nan)
    return _BatchEquilibrium(
        sectors=sectors,
        active=active,
        ln_factor_prices=u,
        factor_prices=factor_prices,
        goods_prices=prices,
        expenditure_shares=shares,
        income_shares=final["lam"],
        outputs=outputs,
        allocations=allocations,
        income=money,
        price_index=np.exp(final["ln_index"]),
        iterations=iteration + 1,
    )


@dataclass(frozen=True)
class EquilibriumState:
    """A solved competitive equilibrium, self-validating on construction.

    ``allocations`` holds one entry per (factor, sector) pair with a positive
    allocation; pairs the sector does not use (outer capital under a zero
    outer exponent) are omitted.  All prices are in units of the aggregate
    consumption index, which is the numeraire.
    """

    spec: EconomySpec
    factor_prices: Mapping[FactorKey, float]
    goods_prices: Mapping[str, float]
    allocations: Mapping[tuple[FactorKey, str], float]
    outputs: Mapping[str, float]
    aggregate_price: float
    aggregate_output: float

    def __post_init__(self) -> None:
        sectors = self.spec.sectors
        if tuple(sorted(self.goods_prices)) != tuple(sorted(sectors)):
            raise SchemaError("goods prices do not cover the spec's sectors")
        if tuple(sorted(self.outputs)) != tuple(sorted(sectors)):
            raise SchemaError("outputs do not cover the spec's sectors")
        for mapping, label in ((self.factor_prices, "factor price"), (self.goods_prices, "goods price"), (self.outputs, "output"), (self.allocations, "allocation")):
            for key, value in mapping.items():
                if not (math.isfinite(value) and value > 0.0):
                    raise InvariantError(f"non-positive {label} for {key!r}: {value}")
        if tuple(sorted(self.factor_prices)) != tuple(sorted(self.spec.endowments)):
            raise SchemaError("factor prices do not cover the endowed factors")
        if abs(self.aggregate_price - 1.0) > STATE_TOL:
            raise InvariantError(
                f"aggregate price {self.aggregate_price} is not the numeraire value 1"
            )
        money = sum(
            self.factor_prices[f] * self.spec.endowments[f] for f in self.spec.endowments
        )
        # Factor market clearing.
        for f in self.spec.endowments:
            total = sum(self.allocations.get((f, n), 0.0) for n in sectors)
            supply = self.spec.endowments[f]
            if abs(total - supply) > STATE_TOL * supply:
                raise InvariantError(
                    f"factor market for {f.name} does not clear: allocated {total}, endowed {supply}"
                )
        # Zero profit and goods market clearing.
        ln_prices = np.log([self.goods_prices[n] for n in sectors])
        shares, ln_index = _consumer_shares(
            self.spec.eta, np.log(self.spec.demand_weights()), ln_prices
        )
        if abs(math.exp(float(ln_index)) - self.aggregate_price) > STATE_TOL:
            raise InvariantError("aggregate price field disagrees with the price index")
        for j, n in enumerate(sectors):
            revenue = self.goods_prices[n] * self.outputs[n]
            payments = sum(
                self.factor_prices[f] * self.allocations.get((f, n), 0.0)
                for f in self.spec.endowments
            )
            if abs(revenue - payments) > STATE_TOL * revenue:
                raise InvariantError(
                    f"zero profit fails in sector {n!r}: revenue {revenue}, payments {payments}"
                )
            demand = shares[j] * money / self.goods_prices[n]
            if abs(demand - self.outputs[n]) > STATE_TOL * self.outputs[n]:
                raise InvariantError(
                    f"goods market for {n!r} does not clear: demand {demand}, output {self.outputs[n]}"
                )
        if abs(self.aggregate_output * self.aggregate_price - money) > STATE_TOL * money:
            raise InvariantError("aggregate output does not equal deflated income")

    @property
    def sectors(self) -> tuple[str, ...]:
        return self.spec.sectors

    def income(self) -> float:
        """Total factor income (equals aggregate output under the numeraire)."""
        return sum(
            self.factor_prices[f] * self.spec.endowments[f] for f in self.spec.endowments
        )

    def economy_point(self) -> EconomyPoint:
        """Sector shares in the bookkeeping form used by the aggregation layer.

        Factors the economy does not price (outer capital when no sector uses
        it) get zero income shares; their quantity-share rows fall back to
        the expenditure shares, which keeps the rows on the unit simplex
        without affecting any weighted aggregate (their weights are zero).
        """
        sectors = self.sectors
        values = {n: self.goods_prices[n] * self.outputs[n] for n in sectors}
        total = sum(values.values())
        zeta = {n: values[n] / total for n in sectors}
        income_shares: dict[tuple[FactorKey, str], float] = {}
        quantity_shares: dict[tuple[FactorKey, str], float] = {}
        for f in FACTOR_ORDER:
            used = sum(self.allocations.get((f, n), 0.0) for n in sectors)
            for n in sectors:
                amount = self.allocations.get((f, n), 0.0)
                price = self.factor_prices.get(f, 0.0)
                income_shares[(f, n)] = price * amount / values[n] if amount else 0.0
                quantity_shares[(f, n)] = amount / used if used > 0.0 else zeta[n]
        return EconomyPoint(
            zeta=zeta,
            sector_income_shares=income_shares,
            sector_quantity_shares=quantity_shares,
            eta=self.spec.eta,
        )


def solve(
    spec: EconomySpec,
    *,
    tol: float = SOLVER_TOL,
    max_iterations: int = MAX_ITERATIONS,
) -> EquilibriumState:
    """Solve the competitive equilibrium of ``spec``.

    Damped Newton on log excess factor demands in log factor prices, started
    from equal prices, with the aggregate consumption price index as the
    numeraire.  Raises ``EstimationError`` with the final residual norm when
    the iteration does not converge.
    """
    ln_endow = np.array(
        [[math.log(spec.endowments[f]) if f in spec.endowments else 0.0 for f in FACTOR_ORDER]]
    )
    batch = _solve_batch(spec, ln_endow, None, tol=tol, max_iterations=max_iterations)
    sectors = spec.sectors
    factor_prices = {
        f: float(batch.factor_prices[0, f]) for f in FACTOR_ORDER if f in spec.endowments
    }
    goods_prices = {n: float(batch.goods_prices[0, j]) for j, n in enumerate(sectors)}
    outputs = {n: float(batch.outputs[0, j]) for j, n in enumerate(sectors)}
    allocations = {
        (f, n): float(batch.allocations[0, j, f])
        for j, n in enumerate(sectors)
        for f in FACTOR_ORDER
        if batch.allocations[0, j, f] > 0.0
    }
    return EquilibriumState(
        spec=spec,
        factor_prices=factor_prices,
        goods_prices=goods_prices,
        allocations=allocations,
        outputs=outputs,
        aggregate_price=float(batch.price_index[0]),
        aggregate_output=float(batch.income[0] / batch.price_index[0]),
    )


def _require_pair(spec: EconomySpec, f: FactorKey, g: FactorKey) -> None:
    if f == g:
        raise SchemaError("the two factors must be distinct")
    for key in (f, g):
        if key not in spec.endowments:
            raise SchemaError(f"factor {key.name} is not priced in this economy")


def aggregate_production_oracle(
    spec: EconomySpec, f: FactorKey, g: FactorKey, step: float = 1e-4
) -> float:
    """Finite-difference estimate of the aggregate production-side elasticity.

    Perturbs the endowment of ``g`` by ``±step`` in logs, re-solves the
    equilibrium, and applies central differences to the log marginal-product
    ratio (deflated factor prices equal marginal products under the
    numeraire).  Returns the reciprocal of the fitted slope.
    """
    _require_pair(spec, f, g)
    if not (step > 0.0):
        raise SchemaError(f"step must be positive, got {step}")
    slopes = []
    for direction in (1.0, -1.0):
        endowments = dict(spec.endowments)
        endowments[g] = endowments[g] * math.exp(direction * step)
        state = solve(dataclasses.replace(spec, endowments=endowments))
        slopes.append(math.log(state.factor_prices[f] / state.factor_prices[g]))
    slope = (slopes[0] - slopes[1]) / (2.0 * step)
    if abs(slope) < 1e-12:
        raise EstimationError(
            "marginal-product ratio did not respond to the endowment perturbation"
        )
    return 1.0 / slope


def _conditional_log_demand(spec: EconomySpec, ln_w: np.ndarray) -> np.ndarray:
    """Log conditional factor demands for one unit of aggregate output.

    Solves the aggregate cost-minimization problem at factor prices
    ``exp(ln_w)`` through its exact dual: sector unit costs price the sector
    outputs, the consumption aggregator prices the output target, and factor
    demands follow from the chained cost shares.  Entries for factors the
    economy does not price are ``-inf``.
    """
    sectors = spec.sectors
    w = np.exp(ln_w)
    lam = np.empty((len(sectors), 6))
    ln_p = np.empty(len(sectors))
    for j, name in enumerate(sectors):
        cs = cost_structure(spec.techs[name], w)
        lam[j] = cs.income_shares
        ln_p[j] = math.log(float(cs.unit_cost))
    shares, ln_index = _consumer_shares(spec.eta, np.log(spec.demand_weights()), ln_p)
    demand_share = shares @ lam
    with np.errstate(divide="ignore"):
        return np.log(demand_share) + float(ln_index) - ln_w


def aggregate_cost_oracle(
    spec: EconomySpec, f: FactorKey, g: FactorKey, step: float = 1e-4
) -> float:
    """Finite-difference estimate of the aggregate cost-side elasticity.

    Evaluates the aggregate conditional factor demands (output fixed at one
    unit) at the equilibrium factor prices, perturbs the price of ``g`` by
    ``±step`` in logs, and applies central differences to the log demand
    ratio of ``f`` to ``g``.
    """
    _require_pair(spec, f, g)
    if not (step > 0.0):
        raise SchemaError(f"step must be positive, got {step}")
    base = solve(spec)
    ln_w = np.array(
        [
            math.log(base.factor_prices[f2]) if f2 in base.factor_prices else 0.0
            for f2 in FACTOR_ORDER
        ]
    )
    diffs = []
    for direction in (1.0, -1.0):
        perturbed = ln_w.copy()
        perturbed[g] += direction * step
        ln_x = _conditional_log_demand(spec, perturbed)
        diffs.append(float(ln_x[f] - ln_x[g]))
    return (diffs[0] - diffs[1]) / (2.0 * step)


@dataclass(frozen=True)
class ShockConfig:
    """Controls for synthetic panel generation.

    ``mode`` selects the generator: ``"equilibrium"`` solves the full model
    for every country-year under trend-plus-shock endowment, efficiency, TFP,
    and industry-mix paths; ``"linearized"`` builds deterministic smooth
    quantity paths and integrates factor prices from the log-linear pricing
    relations (inner rental and outer price pinned at one, unit deflator), so
    the estimating relations hold exactly at every horizon.

    Unset trend/drift maps fall back to the module defaults; factors or
    sectors missing from a provided map get zero trend/drift.
    """

    mode: str = "equilibrium"
    endowment_trends: Mapping[FactorKey, float] | None = None
    endowment_shock_sd: float = 0.02
    efficiency_shock_sd: float = 0.01
    country_scale_sd: float = 0.2
    tfp_trends: Mapping[str, float] | None = None
    tfp_shock_sd: float = 0.005
    industry_drifts: Mapping[str, Sequence[float]] | None = None
    industry_shock_sd: float = 0.02
    industries_per_sector: int = 3

    def __post_init__(self) -> None:
        if self.mode not in ("equilibrium", "linearized"):
            raise SchemaError(f"unknown panel generation mode {self.mode!r}")
        for name in (
            "endowment_shock_sd",
            "efficiency_shock_sd",
            "country_scale_sd",
            "tfp_shock_sd",
            "industry_shock_sd",
        ):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise SchemaError(f"{name} must be non-negative, got {value}")
        if self.industries_per_sector < 1:
            raise SchemaError("at least one industry per sector is required")

    def endowment_trend(self, f: FactorKey) -> float:
        table = self.endowment_trends if self.endowment_trends is not None else DEFAULT_ENDOWMENT_TRENDS
        return float(table.get(f, 0.0))

    def tfp_trend(self, sector: str) -> float:
        table = self.tfp_trends if self.tfp_trends is not None else DEFAULT_TFP_TRENDS
        return float(table.get(sector, 0.0))

    def industry_drift(self, sector: str, index: int) -> float:
        table = self.industry_drifts if self.industry_drifts is not None else DEFAULT_INDUSTRY_DRIFTS
        row = table.get(sector)
        if row is None or index >= len(row):
            return 0.0
        return float(row[index])

    @classmethod
    def from_config(cls, cfg: Mapping) -> "ShockConfig":
        kwargs: dict = {}
        for name in (
            "mode",
            "endowment_shock_sd",
            "efficiency_shock_sd",
            "country_scale_sd",
            "tfp_shock_sd",
            "industry_shock_sd",
            "industries_per_sector",
        ):
            if name in cfg:
                kwargs[name] = cfg[name]
        if "endowment_trends" in cfg:
            kwargs["endowment_trends"] = {
                parse_factor(k): float(v) for k, v in cfg["endowment_trends"].items()
            }
        if "tfp_trends" in cfg:
            kwargs["tfp_trends"] = {k: float(v) for k, v in cfg["tfp_trends"].items()}
        if "industry_drifts" in cfg:
            kwargs["industry_drifts"] = {
                k: tuple(float(x) for x in v) for k, v in cfg["industry_drifts"].items()
            }
        return cls(**kwargs)


def _panel_country_names(countries) -> list[str]:
    if isinstance(countries, int):
        if countries < 1:
            raise SchemaError("at least one country is required")
        return [f"c{i + 1:02d}" for i in range(countries)]
    names = [str(c) for c in countries]
    if not names or len(set(names)) != len(names):
        raise SchemaError("country names must be non-empty and unique")
    return names


def _panel_years(years) -> list[int]:
    if isinstance(years, int):
        if years < 1:
            raise SchemaError("at least one year is required")
        return list(range(1980, 1980 + years))
    out = [int(y) for y in years]
    if out != list(range(out[0], out[0] + len(out))):
        raise SchemaError("years must form a contiguous run")
    return out


def _power_of_two_weights(count: int) -> list[float]:
    """Industry weights that sum to one exactly in floating point."""
    if count == 1:
        return [1.0]
    return [2.0 ** -(d + 1) for d in range(count - 1)] + [2.0 ** -(count - 1)]


def synth_panel(
    spec: EconomySpec,
    countries,
    years,
    shock_config: ShockConfig | None = None,
    seed: int = 0,
) -> Panel:
    """Generate a synthetic panel from country-specific equilibrium paths.

    Countries may be a count (named ``c01``, ``c02``, ...) or a sequence of
    names; years a count (starting 1980) or a contiguous run.  Industries
    within a sector share the sector technology and split its quantities by
    persistent industry weights, which is what makes shift-share instruments
    constructible from the output.  Identical seeds produce bit-identical
    panels.
    """
    cfg = shock_config if shock_config is not None else ShockConfig()
    names = _panel_country_names(countries)
    year_list = _panel_years(years)
    for name in spec.sectors:
        if name not in SECTORS:
            raise SchemaError(
                f"panel generation requires the canonical sector pair, got {name!r}"
            )
    if cfg.mode == "linearized":
        return _linearized_panel(spec, names, year_list, cfg)
    return _equilibrium_panel(spec, names, year_list, cfg, seed)


def _equilibrium_panel(
    spec: EconomySpec,
    names: list[str],
    years: list[int],
    cfg: ShockConfig,
    seed: int,
) -> Panel:
    for name in spec.sectors:
        if not spec.techs[name].alpha > 0.0:
            raise SchemaError(
                "panel generation needs every sector to use outer capital "
                "(the panel schema records positive quantities for all six factors)"
            )
    sectors = spec.sectors
    n_sec = len(sectors)
    horizon = len(years)
    n_industries = cfg.industries_per_sector
    tau = np.arange(horizon, dtype=float)
    rng = np.random.default_rng(seed)

    base_ln = np.array([math.log(spec.endowments[f]) for f in FACTOR_ORDER])
    trend = np.array([cfg.endowment_trend(f) for f in FACTOR_ORDER])
    drift = np.array(
        [[cfg.industry_drift(name, d) for d in range(n_industries)] for name in sectors]
    )

    ln_raw_all = []
    ln_eff_units_all = []
    industry_shares_all = []
    ln_tfp_all = []
    for _ in names:
        scale = rng.normal(0.0, cfg.country_scale_sd)
        endow_innov = rng.normal(0.0, cfg.endowment_shock_sd, (horizon, 6))
        eff_innov = rng.normal(0.0, cfg.efficiency_shock_sd, (horizon, 6))
        tfp_innov = rng.normal(0.0, cfg.tfp_shock_sd, (horizon, n_sec))
        ind_innov = rng.normal(0.0, cfg.industry_shock_sd, (horizon, n_sec, n_industries))
        ln_raw = base_ln + scale + trend * tau[:, None] + np.cumsum(endow_innov, axis=0)
        ln_eff_units = np.cumsum(eff_innov, axis=0)
        ln_tfp = np.empty((horizon, n_sec))
        for j, name in enumerate(sectors):
            ln_tfp[:, j] = (
                math.log(spec.techs[name].tfp)
                + cfg.tfp_trend(name) * tau
                + np.cumsum(tfp_innov[:, j])
            )
        latent = drift * tau[:, None, None] + np.cumsum(ind_innov, axis=0)
        peak = latent.max(axis=2, keepdims=True)
        weights = np.exp(latent - peak)
        industry_shares = weights / weights.sum(axis=2, keepdims=True)
        ln_raw_all.append(ln_raw)
        ln_eff_units_all.append(ln_eff_units)
        industry_shares_all.append(industry_shares)
        ln_tfp_all.append(ln_tfp)

    ln_eff = np.concatenate(
        [raw + eff for raw, eff in zip(ln_raw_all, ln_eff_units_all)], axis=0
    )
    tfp_by_sector = {
        name: np.exp(np.concatenate([t[:, j] for t in ln_tfp_all]))
        for j, name in enumerate(sectors)
    }
    try:
        batch = _solve_batch(spec, ln_eff, tfp_by_sector)
    except EstimationError as exc:
        cell = getattr(exc, "cell", None)
        where = ""
        if cell is not None:
            where = f" for country {names[cell // horizon]!r}, year {years[cell % horizon]}"
        raise EstimationError(f"synthetic panel generation aborted{where}: {exc}") from exc

    observations = []
    for ci, country in enumerate(names):
        efficiency = np.exp(ln_eff_units_all[ci])
        shares = industry_shares_all[ci]
        for ti, year in enumerate(years):
            k = ci * horizon + ti
            recorded_price = batch.factor_prices[k] * efficiency[ti]
            prices = {f: float(recorded_price[f]) for f in FACTOR_ORDER}
            for j, sector in enumerate(sectors):
                raw_alloc = batch.allocations[k, j] / efficiency[ti]
                for d in range(cfg.industries_per_sector):
                    weight = shares[ti, j, d]
                    quantities = {f: float(weight * raw_alloc[f]) for f in FACTOR_ORDER}
                    value = sum(prices[f] * quantities[f] for f in FACTOR_ORDER)
                    observations.append(
                        PanelObservation(
                            country=country,
                            sector=sector,
                            industry=f"ind{d + 1}",
                            year=year,
                            factor_quantity=quantities,
                            factor_price=prices,
                            investment_price={FactorKey.Ki: 1.0, FactorKey.Ko: 1.0},
                            output_value=value,
                            output_deflator=float(batch.goods_prices[k, j]),
                        )
                    )
    return Panel(
        observations=tuple(observations), base_year=years[0], zero_profit_tol=1e-8
    )


def _linearized_wage_curves(
    ln_quantities: Mapping[FactorKey, np.ndarray], betas: Sequence[float]
) -> dict[FactorKey, np.ndarray]:
    """Factor-price paths that satisfy the log-linear pricing relations.

    ``betas`` holds one minus the substitution parameter of each inner nest
    in nest order.  The pseudo-aggregate weights are the run's mean wage-bill
    ratios, which themselves depend on the wage paths, so the pair is solved
    by fixed-point iteration to machine precision.  The inner rental and the
    price of outer capital are pinned at one.
    """
    ln_ki = ln_quantities[FactorKey.Ki]
    ln_fh = ln_quantities[FactorKey.Lfh]
    ln_mh = ln_quantities[FactorKey.Lmh]
    ln_fu = ln_quantities[FactorKey.Lfu]
    ln_mu = ln_quantities[FactorKey.Lmu]
    b_fh, b_mh, b_fu, b_mu = betas

    gamma = np.array([0.5, 1.0 / 3.0, 0.25])
    ln_w_fh = ln_w_mh = ln_w_fu = ln_w_mu = np.zeros_like(ln_ki)
    for _ in range(500):
        ln_d = (1.0 - gamma[0]) * ln_ki + gamma[0] * ln_fh
        ln_c = (1.0 - gamma[1]) * ln_d + gamma[1] * ln_mh
        ln_b = (1.0 - gamma[2]) * ln_c + gamma[2] * ln_fu
        ln_w_fh = b_fh * (ln_ki - ln_fh)
        ln_w_mh = ln_w_fh + b_mh * (ln_d - ln_mh) - b_fh * (ln_d - ln_fh)
        ln_w_fu = ln_w_fh - (
            b_fh * (ln_d - ln_fh) - b_fu * (ln_c - ln_fu) + b_mh * (ln_c - ln_d)
        )
        ln_w_mu = ln_w_fu + b_mu * (ln_b - ln_mu) - b_fu * (ln_b - ln_fu)
        weights = gamma_weights_from_bills(
            np.exp(ln_ki),
            np.exp(ln_fh + ln_w_fh),
            np.exp(ln_mh + ln_w_mh),
            np.exp(ln_fu + ln_w_fu),
        )
        updated = np.array([weights.gamma_fh, weights.gamma_mh, weights.gamma_fu])
        if np.max(np.abs(updated - gamma)) < 1e-14:
            gamma = updated
            break
        gamma = updated
    else:
        raise EstimationError("pseudo-aggregate weights did not reach a fixed point")
    ones = np.ones_like(ln_ki)
    return {
        FactorKey.Ki: ones,
        FactorKey.Lfh: np.exp(ln_w_fh),
        FactorKey.Lmh: np.exp(ln_w_mh),
        FactorKey.Lfu: np.exp(ln_w_fu),
        FactorKey.Lmu: np.exp(ln_w_mu),
        FactorKey.Ko: ones,
    }


def _linearized_panel(
    spec: EconomySpec,
    names: list[str],
    years: list[int],
    cfg: ShockConfig,
) -> Panel:
    if FactorKey.Ko not in spec.endowments:
        raise SchemaError(
            "panel generation needs an outer-capital endowment "
            "(the panel schema records positive quantities for all six factors)"
        )
    horizon = len(years)
    tau = np.arange(horizon, dtype=float)
    industry_weights = _power_of_two_weights(cfg.industries_per_sector)
    observations = []
    for ci, country in enumerate(names):
        offset = 0.0
        if len(names) > 1:
            offset = 0.1 * (ci - (len(names) - 1) / 2.0) / (len(names) - 1)
        for si, sector in enumerate(spec.sectors):
            ln_q: dict[FactorKey, np.ndarray] = {}
            for i, f in enumerate(FACTOR_ORDER):
                tilt = 0.01 * (((3 * i + 5 * ci + 7 * si) % 11) - 5) / 25.0
                curve = (((2 * i + 3 * ci + 5 * si) % 7) - 3) / 40.0
                ln_q[f] = (
                    math.log(spec.endowments[f])
                    + offset
                    + (cfg.endowment_trend(f) + tilt) * tau
                    + curve * tau**2 / horizon
                )
            betas = [1.0 - s for s in spec.techs[sector].sigmas]
            wages = _linearized_wage_curves(ln_q, betas)
            quantities = {f: np.exp(ln_q[f]) for f in FACTOR_ORDER}
            for ti, year in enumerate(years):
                prices = {f: float(wages[f][ti]) for f in FACTOR_ORDER}
                for d, weight in enumerate(industry_weights):
                    cell_q = {f: float(weight * quantities[f][ti]) for f in FACTOR_ORDER}
                    value = sum(prices[f] * cell_q[f] for f in FACTOR_ORDER)
                    observations.append(
                        PanelObservation(
                            country=country,
                            sector=sector,
                            industry=f"ind{d + 1}",
                            year=year,
                            factor_quantity=cell_q,
                            factor_price=prices,
                            investment_price={FactorKey.Ki: 1.0, FactorKey.Ko: 1.0},
                            output_value=value,
                            output_deflator=1.0,
                        )
                    )
    return Panel(
        observations=tuple(observations), base_year=years[0], zero_profit_tol=1e-8
    )
