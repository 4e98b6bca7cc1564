"""Linear GMM and IV estimation of the nest substitution parameters.

The estimating system consists of five overlapping-long-difference
factor-price-ratio equations that are linear in the coefficients ``1 - sigma``
of the four inner nests.  Regressors combine observed factor log-changes with
log-linearized nest aggregates built from wage-bill weights; shift-share
instrument values stand in for the endogenous log-changes.  Estimation is
two-step GMM: an identity first-step weighting followed by a second step
weighted by the inverse of the country-clustered moment covariance, with a
country-clustered sandwich covariance for the estimates.

The module also provides the sequential (nest-by-nest) identification walk,
the preliminary wage-gap IV regressions, the consumption-share IV for the
demand-side substitution elasticity, the one-to-four-level specification
ladder, and the robustness variants (extra covariates, the alternative
rental-price construction, and country-specific trend polynomials).
"""
from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import chi2

from .ces import GammaWeights, gamma_weights
from .errors import EstimationError, InvariantError, SchemaError
from .factors import (
    FEMALE_FACTORS,
    LABOR_FACTORS,
    MALE_FACTORS,
    NEST_ORDER,
    SKILLED_FACTORS,
    UNSKILLED_FACTORS,
    FactorKey,
)
from .instruments import BartikSeries
from .panel import NO_RENTAL_FLAG, Panel, PanelObservation

__all__ = [
    "EqualityTest",
    "GmmResult",
    "IvResult",
    "LadderPanel",
    "MomentSet",
    "SectorFrame",
    "build_sector_frame",
    "consumption_elasticity",
    "equality_wald",
    "estimate_gmm",
    "load_institutions",
    "preliminary_iv",
    "robustness_variant",
    "run_gamma_weights",
    "sequential_identify",
    "specification_ladder",
    "two_step_linear_gmm",
]

# Parameters of the four-level system, innermost nest first.  Estimation is
# linear in the complement coefficients b = 1 - sigma, reported as sigma.
PARAM_ORDER: tuple[str, ...] = tuple(NEST_ORDER)

# Residual identifiers of the five-equation system.  Each names the
# factor-price ratio whose log-change is the left-hand side:
#   fh   skilled-female wage over the ICT rental
#   mh   skilled-male wage over the skilled-female wage
#   fu   skilled-female wage over the unskilled-female wage
#   mu1  unskilled-male wage over the unskilled-female wage
#   mu2  skilled-male wage over the unskilled-male wage
RESIDUAL_IDS: tuple[str, ...] = ("fh", "mh", "fu", "mu1", "mu2")

# Quantities an instrument tag may reference: the five inner factors and the
# three log-linearized nest aggregates.
_INSTRUMENT_TAGS: tuple[str, ...] = ("Ki", "Lfh", "Lmh", "Lfu", "Lmu", "D", "C", "B")

_RCOND = 1e-12
# Wald statistics whose numerator is below this absolute size are reported as
# exactly zero: the difference is then below estimation precision and the
# ratio of two vanishing quantities would otherwise be numerical noise.
_WALD_NUMERATOR_FLOOR = 1e-9


def _parse_instrument_id(iid: str) -> tuple[str, str]:
    """Split a canonical instrument id "<a>^b-<b>^b" into its two tags."""
    parts = iid.split("-")
    if len(parts) == 2 and all(p.endswith("^b") for p in parts):
        a, b = (p[:-2] for p in parts)
        if a in _INSTRUMENT_TAGS and b in _INSTRUMENT_TAGS and a != b:
            return a, b
    raise SchemaError(
        f"unknown instrument id {iid!r}; expected '<a>^b-<b>^b' with tags "
        f"drawn from {_INSTRUMENT_TAGS}"
    )


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


_MOST_RELEVANT_EQUATIONS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("fh", ("Lfh^b-Ki^b",)),
    ("mh", ("D^b-Lmh^b",)),
    ("fu", ("C^b-Lfu^b",)),
    ("mu1", ("B^b-Lmu^b",)),
    ("mu2", ("B^b-Lmu^b",)),
)

_FULL_EQUATIONS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("fh", ("Lfh^b-Ki^b",)),
    ("mh", ("D^b-Lmh^b", "D^b-Lfh^b")),
    ("fu", ("C^b-Lfu^b", "D^b-Lfh^b", "C^b-D^b")),
    ("mu1", ("B^b-Lmu^b", "B^b-Lfu^b")),
    ("mu2", ("B^b-Lmu^b", "C^b-Lmh^b", "B^b-C^b")),
)


@dataclass(frozen=True)
class MomentSet:
    """A named collection of (residual, instrument) orthogonality conditions.

    ``kind`` is ``"most-relevant"`` (five conditions, one ratio instrument per
    equation with the outermost nest doubly instrumented) or ``"full"`` (the
    same five plus six additional cross-ratio conditions).
    """

    kind: str
    equations: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self) -> None:
        if self.kind not in ("most-relevant", "full"):
            raise SchemaError(
                f"unknown moment-set kind {self.kind!r}; "
                "expected 'most-relevant' or 'full'"
            )
        object.__setattr__(
            self,
            "equations",
            tuple((rid, tuple(iids)) for rid, iids in self.equations),
        )
        seen_eq = set()
        for rid, iids in self.equations:
            if rid not in RESIDUAL_IDS:
                raise SchemaError(
                    f"unknown residual id {rid!r}; expected one of {RESIDUAL_IDS}"
                )
            if rid in seen_eq:
                raise SchemaError(f"residual id {rid!r} listed twice")
            seen_eq.add(rid)
            if not iids:
                raise SchemaError(f"residual {rid!r} has no instruments")
            for iid in iids:
                _parse_instrument_id(iid)
        count = len(self.moments())
        expected = 5 if self.kind == "most-relevant" else 11
        if count != expected:
            raise SchemaError(
                f"moment set of kind {self.kind!r} must carry exactly "
                f"{expected} conditions, got {count}"
            )

    @classmethod
    def most_relevant(cls) -> "MomentSet":
        return cls(kind="most-relevant", equations=_MOST_RELEVANT_EQUATIONS)

    @classmethod
    def full(cls) -> "MomentSet":
        return cls(kind="full", equations=_FULL_EQUATIONS)

    def moments(self) -> tuple[tuple[str, str], ...]:
        """Flattened (residual-id, instrument-id) pairs, in declaration order."""
        return tuple(
            (rid, iid) for rid, iids in self.equations for iid in iids
        )


def _validated_vcov(vcov: np.ndarray, labels: Sequence[str]) -> np.ndarray:
    v = np.asarray(vcov, dtype=float)
    p = len(labels)
    if v.shape != (p, p):
        raise SchemaError(f"covariance must be {p}x{p}, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvariantError("covariance matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(v))))
    if np.max(np.abs(v - v.T)) > 1e-8 * scale:
        raise InvariantError("covariance matrix is not symmetric")
    v = 0.5 * (v + v.T)
    eigs = np.linalg.eigvalsh(v)
    if eigs.size and eigs[0] < -1e-8 * scale:
        raise InvariantError(
            f"covariance matrix is not positive semidefinite (min eig {eigs[0]:.3e})"
        )
    v.setflags(write=False)
    return v


@dataclass(frozen=True)
class GmmResult:
    """Point estimates and inference for the four nest parameters.

    ``sigma_hat`` maps the nest tags ("fh", "mh", "fu", "mu") to estimates,
    ``vcov`` is the country-clustered covariance of the estimates in
    :data:`PARAM_ORDER`, ``overid_wald``/``overid_pvalue`` carry the
    over-identification test (degrees of freedom: number of moment conditions
    minus number of parameters), and ``sigma_mu_split`` reports the two
    just-identified outer-nest estimates when the sequential walk produced
    them.
    """

    sigma_hat: Mapping[str, float]
    vcov: np.ndarray
    overid_wald: float
    overid_pvalue: float
    n_obs: int
    n_clusters: int
    sigma_mu_split: tuple[float, float] | None = None
    sigma_mu_split_se: tuple[float, float] | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        missing = [tag for tag in PARAM_ORDER if tag not in self.sigma_hat]
        if missing:
            raise SchemaError(f"sigma_hat is missing entries for {missing}")
        object.__setattr__(
            self, "sigma_hat", {k: float(v) for k, v in self.sigma_hat.items()}
        )
        object.__setattr__(self, "vcov", _validated_vcov(self.vcov, PARAM_ORDER))
        object.__setattr__(self, "flags", tuple(self.flags))

    def std_errors(self) -> dict[str, float]:
        diag = np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))
        return {tag: float(diag[i]) for i, tag in enumerate(PARAM_ORDER)}


@dataclass(frozen=True)
class IvResult:
    """A single-coefficient instrumental-variables estimate."""

    beta_hat: float
    se_clustered: float
    first_stage_f: float
    elasticity_at_means: float
    elasticity_se: float = float("nan")
    n_obs: int = 0
    n_clusters: int = 0
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "flags", tuple(self.flags))


@dataclass(frozen=True)
class EqualityTest:
    """Wald test of equality between two estimated parameters."""

    left: str
    right: str
    statistic: float
    pvalue: float


@dataclass(frozen=True)
class LadderPanel:
    """One rung of the specification ladder.

    ``level`` counts the nesting depth of the fitted technology (1 = a single
    inner nest pooling ICT capital with all four labor types, 4 = the full
    model).  ``estimates``/``std_errors`` are keyed by the nest tags, and
    ``walds`` holds the pairwise equality tests reported for that rung.
    """

    level: int
    estimates: Mapping[str, float]
    std_errors: Mapping[str, float]
    walds: tuple[EqualityTest, ...]
    n_obs: int
    n_clusters: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "estimates", dict(self.estimates))
        object.__setattr__(self, "std_errors", dict(self.std_errors))
        object.__setattr__(self, "walds", tuple(self.walds))


# ---------------------------------------------------------------------------
# Panel -> per-sector long-difference frame
# ---------------------------------------------------------------------------


def _usable(obs: PanelObservation) -> bool:
    return NO_RENTAL_FLAG not in obs.flags


def _sector_levels(
    panel: Panel, sector: str
) -> dict[str, dict[int, dict[str, float]]]:
    """Per-country, per-year sector-level sums of quantities and wage bills.

    Industry detail is summed within each (country, year); the unit price of
    each factor is the summed bill over the summed quantity.  Observations
    flagged as lacking a usable rental price are skipped.
    """
    acc: dict[str, dict[int, dict[str, float]]] = defaultdict(dict)
    for obs in panel.observations:
        if obs.sector != sector or not _usable(obs):
            continue
        cell = acc[obs.country].setdefault(obs.year, defaultdict(float))
        for f in FactorKey:
            cell[f"q:{f.name}"] += obs.factor_quantity[f]
            cell[f"b:{f.name}"] += obs.wage_bill(f)
        cell["output_value"] += obs.output_value
        cell["deflator_weight"] += obs.output_value
        cell["deflator_sum"] += obs.output_deflator * obs.output_value
    return {c: dict(years) for c, years in acc.items()}


def run_gamma_weights(panel: Panel) -> dict[tuple[str, str], GammaWeights]:
    """Pseudo-aggregate weights for every (country, sector) run of the panel.

    The weights are the time means of the wage-bill ratios of each run, with
    industry detail summed within years.
    """
    runs: dict[tuple[str, str], list[PanelObservation]] = defaultdict(list)
    for obs in panel.observations:
        if _usable(obs):
            runs[(obs.country, obs.sector)].append(obs)
    return {key: gamma_weights(group) for key, group in sorted(runs.items())}


def _resolve_gammas(
    gammas, country: str, sector: str, computed: dict[tuple[str, str], GammaWeights]
) -> GammaWeights:
    if gammas is None:
        return computed[(country, sector)]
    if isinstance(gammas, GammaWeights):
        return gammas
    if (country, sector) in gammas:
        return gammas[(country, sector)]
    if sector in gammas:
        return gammas[sector]
    raise SchemaError(
        f"no pseudo-aggregate weights supplied for ({country!r}, {sector!r})"
    )


def _normalize_bartiks(bartiks) -> dict[str, dict[tuple[str, str, int], float]]:
    """Index instrument rows as target -> (country, sector, year) -> value."""
    if bartiks is None:
        return {}
    out: dict[str, dict[tuple[str, str, int], float]] = defaultdict(dict)
    if isinstance(bartiks, Mapping):
        groups = []
        for target, rows in bartiks.items():
            name = target.name if isinstance(target, FactorKey) else str(target)
            groups.append((name, rows))
    else:
        collected: dict[str, list[BartikSeries]] = defaultdict(list)
        for row in bartiks:
            name = (
                row.target.name
                if isinstance(row.target, FactorKey)
                else str(row.target)
            )
            collected[name].append(row)
        groups = list(collected.items())
    for name, rows in groups:
        for row in rows:
            out[name][row.key] = float(row.value)
    return dict(out)


_FACTOR_TARGETS: tuple[FactorKey, ...] = (
    FactorKey.Ki,
    FactorKey.Lfh,
    FactorKey.Lmh,
    FactorKey.Lfu,
    FactorKey.Lmu,
)


@dataclass(frozen=True)
class SectorFrame:
    """Long-difference data for one sector, aligned across equations.

    Each row is one (country, end-year) overlapping long difference.  The
    ``columns`` map holds, per row: the factor-quantity log-changes (keyed by
    factor name), the wage log-changes ("w:fh", ...), the ICT-rental
    log-change ("r_i"), the pseudo-aggregate log-changes ("D", "C", "B"), and
    — when instrument rows were supplied — the instrument log-changes
    ("z:Ki", ..., "z:D", "z:C", "z:B").
    """

    sector: str
    countries: tuple[str, ...]
    years: tuple[int, ...]
    columns: Mapping[str, np.ndarray]
    horizon: int

    def __post_init__(self) -> None:
        cols = {k: np.asarray(v, dtype=float) for k, v in self.columns.items()}
        n = len(self.countries)
        for key, arr in cols.items():
            if arr.shape != (n,):
                raise SchemaError(f"column {key!r} has shape {arr.shape}, want ({n},)")
            arr.setflags(write=False)
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "countries", tuple(self.countries))
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))

    @property
    def n_rows(self) -> int:
        return len(self.countries)

    def cluster_ids(self) -> np.ndarray:
        return np.asarray(self.countries, dtype=object)


_WAGE_KEYS = {
    "fh": FactorKey.Lfh,
    "mh": FactorKey.Lmh,
    "fu": FactorKey.Lfu,
    "mu": FactorKey.Lmu,
}


def build_sector_frame(
    panel: Panel,
    bartiks,
    gammas,
    horizon: int,
    sector: str,
    *,
    need_instruments: bool = True,
) -> SectorFrame:
    """Assemble the long-difference estimation frame for one sector.

    A row exists for every country and end-year with a complete pair of
    sector-level observations ``horizon`` years apart and — when instruments
    are requested — instrument rows for all five inner factors at the end
    year.  Pseudo-aggregate log levels use each country-sector run's own
    wage-bill weights so that differencing and log-linearization commute.
    """
    horizon = int(horizon)
    if horizon < 1:
        raise SchemaError("horizon must be a positive number of years")
    levels = _sector_levels(panel, sector)
    if not levels:
        raise SchemaError(f"panel has no usable observations for sector {sector!r}")
    z_values = _normalize_bartiks(bartiks) if need_instruments else {}
    if need_instruments:
        missing = [f.name for f in _FACTOR_TARGETS if f.name not in z_values]
        if missing:
            raise SchemaError(
                f"instrument rows missing for targets {missing}; build them "
                "with the shift-share constructor first"
            )
    computed = run_gamma_weights(panel) if gammas is None else {}

    countries: list[str] = []
    years: list[int] = []
    columns: dict[str, list[float]] = defaultdict(list)

    for country in sorted(levels):
        by_year = levels[country]
        g = _resolve_gammas(gammas, country, sector, computed)
        for year in sorted(by_year):
            prev = by_year.get(year - horizon)
            if prev is None:
                continue
            now = by_year[year]
            if need_instruments:
                key = (country, sector, year)
                if any(key not in z_values[f.name] for f in _FACTOR_TARGETS):
                    continue
            row: dict[str, float] = {}
            ln_now: dict[FactorKey, float] = {}
            ln_prev: dict[FactorKey, float] = {}
            for f in _FACTOR_TARGETS:
                ln_now[f] = math.log(now[f"q:{f.name}"])
                ln_prev[f] = math.log(prev[f"q:{f.name}"])
                row[f.name] = ln_now[f] - ln_prev[f]
            for tag, f in _WAGE_KEYS.items():
                w_now = now[f"b:{f.name}"] / now[f"q:{f.name}"]
                w_prev = prev[f"b:{f.name}"] / prev[f"q:{f.name}"]
                row[f"w:{tag}"] = math.log(w_now) - math.log(w_prev)
            r_now = now["b:Ki"] / now["q:Ki"]
            r_prev = prev["b:Ki"] / prev["q:Ki"]
            row["r_i"] = math.log(r_now) - math.log(r_prev)

            def chain(ln_ki, ln_fh, ln_mh, ln_fu):
                ln_d = (1.0 - g.gamma_fh) * ln_ki + g.gamma_fh * ln_fh
                ln_c = (1.0 - g.gamma_mh) * ln_d + g.gamma_mh * ln_mh
                ln_b = (1.0 - g.gamma_fu) * ln_c + g.gamma_fu * ln_fu
                return ln_d, ln_c, ln_b

            d1, c1, b1 = chain(
                ln_now[FactorKey.Ki],
                ln_now[FactorKey.Lfh],
                ln_now[FactorKey.Lmh],
                ln_now[FactorKey.Lfu],
            )
            d0, c0, b0 = chain(
                ln_prev[FactorKey.Ki],
                ln_prev[FactorKey.Lfh],
                ln_prev[FactorKey.Lmh],
                ln_prev[FactorKey.Lfu],
            )
            row["D"], row["C"], row["B"] = d1 - d0, c1 - c0, b1 - b0

            if need_instruments:
                z = {f: z_values[f.name][(country, sector, year)] for f in _FACTOR_TARGETS}
                zd, zc, zb = chain(
                    z[FactorKey.Ki], z[FactorKey.Lfh], z[FactorKey.Lmh], z[FactorKey.Lfu]
                )
                for f in _FACTOR_TARGETS:
                    row[f"z:{f.name}"] = z[f]
                row["z:D"], row["z:C"], row["z:B"] = zd, zc, zb

            countries.append(country)
            years.append(year)
            for key, value in row.items():
                columns[key].append(value)

    if not countries:
        raise EstimationError(
            f"no usable long-difference rows for sector {sector!r} at "
            f"horizon {horizon}"
        )
    return SectorFrame(
        sector=sector,
        countries=tuple(countries),
        years=tuple(years),
        columns={k: np.asarray(v, dtype=float) for k, v in columns.items()},
        horizon=horizon,
    )


# ---------------------------------------------------------------------------
# Equation registry
# ---------------------------------------------------------------------------


def _four_level_equations(
    frame: SectorFrame,
) -> dict[str, tuple[np.ndarray, dict[str, np.ndarray]]]:
    """The five-equation system: residual id -> (y, {param: regressor}).

    Every equation's left side is the log-change of a factor-price ratio and
    its right side is linear in the complement coefficients b = 1 - sigma.
    """
    c = frame.columns
    d_ki, d_fh, d_mh = c["Ki"], c["Lfh"], c["Lmh"]
    d_fu, d_mu = c["Lfu"], c["Lmu"]
    d_nd, d_nc, d_nb = c["D"], c["C"], c["B"]
    return {
        "fh": (c["w:fh"] - c["r_i"], {"fh": d_ki - d_fh}),
        "mh": (
            c["w:mh"] - c["w:fh"],
            {"mh": d_nd - d_mh, "fh": -(d_nd - d_fh)},
        ),
        "fu": (
            c["w:fh"] - c["w:fu"],
            {"fh": d_nd - d_fh, "mh": d_nc - d_nd, "fu": -(d_nc - d_fu)},
        ),
        "mu1": (
            c["w:mu"] - c["w:fu"],
            {"mu": d_nb - d_mu, "fu": -(d_nb - d_fu)},
        ),
        "mu2": (
            c["w:mh"] - c["w:mu"],
            {"mh": d_nc - d_mh, "fu": d_nb - d_nc, "mu": -(d_nb - d_mu)},
        ),
    }


def _instrument_column(frame: SectorFrame, iid: str) -> np.ndarray:
    a, b = _parse_instrument_id(iid)
    try:
        return frame.columns[f"z:{a}"] - frame.columns[f"z:{b}"]
    except KeyError:
        raise SchemaError(
            f"frame for sector {frame.sector!r} carries no instrument columns; "
            "build it with instrument rows"
        ) from None


# ---------------------------------------------------------------------------
# Two-step linear GMM engine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _EngineResult:
    beta: np.ndarray
    vcov: np.ndarray
    j_stat: float
    j_df: int
    n_obs: int
    n_clusters: int
    flags: tuple[str, ...]


def _cluster_indices(cluster_ids: Sequence) -> list[np.ndarray]:
    groups: dict[object, list[int]] = defaultdict(list)
    for i, cid in enumerate(cluster_ids):
        groups[cid].append(i)
    return [np.asarray(ix, dtype=int) for _, ix in sorted(groups.items(), key=lambda kv: str(kv[0]))]


def _clustered_moment_cov(
    per_row: np.ndarray, clusters: list[np.ndarray]
) -> np.ndarray:
    """Country-clustered covariance of the stacked moment vector.

    ``per_row`` is (n, J): each row's contribution to every moment.  Returns
    (1/n) * sum_c u_c u_c' scaled by the small-sample factor G/(G-1).
    """
    n = per_row.shape[0]
    g_count = len(clusters)
    meat = np.zeros((per_row.shape[1], per_row.shape[1]))
    for ix in clusters:
        u = per_row[ix].sum(axis=0)
        meat += np.outer(u, u)
    correction = g_count / (g_count - 1) if g_count > 1 else 1.0
    return correction * meat / n


def two_step_linear_gmm(
    y_by_eq: Mapping[str, np.ndarray],
    x_by_eq: Mapping[str, Mapping[str, np.ndarray]],
    moments: Sequence[tuple[str, str, np.ndarray]],
    cluster_ids: Sequence,
    param_names: Sequence[str],
    *,
    guard_params: int | None = None,
) -> _EngineResult:
    """Two-step GMM for a stacked linear system sharing parameters.

    ``y_by_eq`` maps equation ids to outcome vectors, ``x_by_eq`` maps them to
    {parameter: regressor column}, and ``moments`` lists
    (equation-id, instrument-id, instrument column) conditions.  All columns
    must be aligned on the same rows; ``cluster_ids`` labels each row's
    cluster.  Instrument columns are standardized to unit root-mean-square
    internally, which makes the point estimates invariant to positive
    rescaling of any instrument.  The first step uses identity weighting, the
    second the pseudo-inverse of the clustered moment covariance; when the
    first-step residuals already vanish the identity weighting is kept.  The
    over-identification statistic is exactly zero for just-identified systems.
    """
    params = list(param_names)
    p = len(params)
    if not moments:
        raise SchemaError("no moment conditions supplied")
    n = len(next(iter(y_by_eq.values())))
    clusters = _cluster_indices(cluster_ids)
    g_count = len(clusters)
    if g_count < 2:
        raise EstimationError(
            f"need at least two clusters for inference, got {g_count}"
        )
    # Auxiliary covariate coefficients do not tighten the cluster-count
    # requirement; callers pass the structural parameter count instead.
    required = p if guard_params is None else min(guard_params, p)
    if g_count < required:
        raise EstimationError(
            f"fewer clusters ({g_count}) than parameters ({required}); "
            "the clustered covariance would be degenerate"
        )

    j = len(moments)
    z_cols = np.zeros((n, j))
    y_cols = np.zeros((n, j))
    x_rows = np.zeros((j, n, p))
    labels: list[str] = []
    for k, (eq_id, iid, z) in enumerate(moments):
        z = np.asarray(z, dtype=float)
        if z.shape != (n,):
            raise SchemaError(
                f"instrument column for moment ({eq_id!r}, {iid!r}) has shape "
                f"{z.shape}, want ({n},)"
            )
        rms = float(np.sqrt(np.mean(z * z)))
        if not (rms > 0.0) or not math.isfinite(rms):
            raise EstimationError(
                f"instrument matrix is rank-deficient: instrument {iid!r} for "
                f"equation {eq_id!r} has no variation"
            )
        z_cols[:, k] = z / rms
        y_cols[:, k] = np.asarray(y_by_eq[eq_id], dtype=float)
        for pi, name in enumerate(params):
            col = x_by_eq[eq_id].get(name)
            if col is not None:
                x_rows[k, :, pi] = np.asarray(col, dtype=float)
        labels.append(f"({eq_id}, {iid})")

    # Moment Jacobian G[j, p] = mean over rows of z_j * x_{eq(j), p} and
    # intercept-free target s[j] = mean of z_j * y_{eq(j)}.
    big_g = np.einsum("nj,jnp->jp", z_cols, x_rows) / n
    s_vec = np.einsum("nj,nj->j", z_cols, y_cols) / n

    row_scale = np.max(np.abs(big_g), axis=1)
    dead = np.where(row_scale <= _RCOND * max(1.0, float(np.max(row_scale, initial=0.0))))[0]
    if dead.size:
        raise EstimationError(
            "instrument matrix is rank-deficient: moment "
            f"{labels[int(dead[0])]} does not move any regressor"
        )
    svals = np.linalg.svd(big_g, compute_uv=False)
    if svals.size < p or svals[p - 1] <= _RCOND * svals[0]:
        u_mat, _, _ = np.linalg.svd(big_g)
        culprit = int(np.argmax(np.abs(u_mat[:, -1])))
        raise EstimationError(
            "instrument matrix is rank-deficient: the offending moment is "
            f"{labels[culprit]}"
        )

    def solve_with(weight: np.ndarray) -> np.ndarray:
        a = big_g.T @ weight @ big_g
        b = big_g.T @ weight @ s_vec
        return np.linalg.pinv(a, rcond=_RCOND) @ b

    beta1 = solve_with(np.eye(j))

    def per_row_moments(beta: np.ndarray) -> np.ndarray:
        resid = y_cols - np.einsum("jnp,p->nj", x_rows, beta)
        return z_cols * resid

    flags: list[str] = []
    rows1 = per_row_moments(beta1)
    y_scale = max(1.0, float(np.max(np.abs(y_cols), initial=0.0)))
    if float(np.max(np.abs(rows1), initial=0.0)) <= 1e-10 * y_scale:
        weight = np.eye(j)
        beta2 = beta1
        flags.append("zero-residual")
    else:
        s_mat = _clustered_moment_cov(rows1, clusters)
        # Floor the covariance with a tiny relative ridge: a moment whose
        # residuals vanish exactly would otherwise be annihilated by the
        # pseudo-inverse (zero weight on the best-satisfied condition).  The
        # ridge keeps its weight large but finite; just-identified systems
        # are invariant to any nonsingular weighting.
        ridge = 1e-10 * float(np.max(np.diag(s_mat), initial=0.0))
        if ridge > 0.0:
            weight = np.linalg.pinv(
                s_mat + ridge * np.eye(j), rcond=_RCOND
            )
        else:
            weight = np.eye(j)
            flags.append("zero-residual")
        beta2 = solve_with(weight)

    rows2 = per_row_moments(beta2)
    s_final = _clustered_moment_cov(rows2, clusters)
    bread = np.linalg.pinv(big_g.T @ weight @ big_g, rcond=_RCOND)
    middle = big_g.T @ weight @ s_final @ weight @ big_g
    vcov = bread @ middle @ bread / n
    vcov = 0.5 * (vcov + vcov.T)

    df = j - p
    if df == 0:
        j_stat = 0.0
    else:
        gbar = s_vec - big_g @ beta2
        j_stat = float(n * gbar @ weight @ gbar)
    return _EngineResult(
        beta=beta2,
        vcov=vcov,
        j_stat=j_stat,
        j_df=df,
        n_obs=n,
        n_clusters=g_count,
        flags=tuple(flags),
    )


# ---------------------------------------------------------------------------
# Extra covariates
# ---------------------------------------------------------------------------


def _extra_columns(
    extras, frame: SectorFrame
) -> tuple[dict[str, np.ndarray], tuple[str, ...]]:
    """Convert level covariates into aligned long-difference columns.

    Covariates are keyed (country, year).  Strictly positive series enter as
    log-changes, anything else as level changes.  Columns that come out
    identically zero are dropped (they cannot move the estimates), and rows
    for which a covariate is missing raise an error so the caller sees the
    coverage gap instead of a silently shrunken sample.
    """
    if not extras:
        return {}, ()
    out: dict[str, np.ndarray] = {}
    dropped: list[str] = []
    for name in sorted(extras):
        series = extras[name]
        values = {(str(c), int(t)): float(v) for (c, t), v in series.items()}
        use_logs = all(v > 0.0 for v in values.values())
        col = np.zeros(frame.n_rows)
        for i, (country, year) in enumerate(zip(frame.countries, frame.years)):
            now = values.get((country, year))
            prev = values.get((country, year - frame.horizon))
            if now is None or prev is None:
                raise SchemaError(
                    f"covariate {name!r} has no value for {country!r} at "
                    f"year {year} and/or {year - frame.horizon}"
                )
            col[i] = math.log(now) - math.log(prev) if use_logs else now - prev
        if np.max(np.abs(col), initial=0.0) == 0.0:
            dropped.append(name)
            continue
        out[name] = col
    return out, tuple(dropped)


# ---------------------------------------------------------------------------
# Main joint estimator
# ---------------------------------------------------------------------------


def _moment_blocks(
    frame: SectorFrame,
    equations: Mapping[str, tuple[np.ndarray, dict[str, np.ndarray]]],
    moment_pairs: Sequence[tuple[str, str]],
    instruments: str,
) -> list[tuple[str, str, np.ndarray]]:
    blocks: list[tuple[str, str, np.ndarray]] = []
    if instruments == "bartik":
        for rid, iid in moment_pairs:
            blocks.append((rid, iid, _instrument_column(frame, iid)))
    elif instruments == "regressors":
        for rid in dict.fromkeys(rid for rid, _ in moment_pairs):
            for pname, col in equations[rid][1].items():
                blocks.append((rid, f"x:{rid}:{pname}", col))
    else:
        raise SchemaError(
            f"unknown instrument source {instruments!r}; expected 'bartik' "
            "or 'regressors'"
        )
    return blocks


def _boundary_flags(sigma_hat: Mapping[str, float]) -> list[str]:
    return [
        f"sigma-at-boundary:{tag}"
        for tag in PARAM_ORDER
        if sigma_hat[tag] >= 1.0
    ]


def _split_mu_wald(
    frame: SectorFrame,
    equations: Mapping[str, tuple[np.ndarray, dict[str, np.ndarray]]],
    moments: MomentSet,
    cluster_ids: Sequence,
    extra_cols: Mapping[str, np.ndarray],
    instruments: str,
) -> tuple[float, float]:
    """Equality Wald for the two routes to the outermost nest parameter.

    Re-estimates the system with the outer-nest coefficient split between the
    two equations that carry it, then tests the two coefficients for
    equality.  Differences below estimation precision report a statistic of
    exactly zero.
    """
    split_eqs: dict[str, tuple[np.ndarray, dict[str, np.ndarray]]] = {}
    for rid, (y, xs) in equations.items():
        renamed: dict[str, np.ndarray] = {}
        for pname, col in xs.items():
            if pname == "mu":
                renamed["mu#1" if rid == "mu1" else "mu#2"] = col
            else:
                renamed[pname] = col
        split_eqs[rid] = (y, renamed)
    params = ["fh", "mh", "fu", "mu#1", "mu#2"]
    blocks = _moment_blocks(frame, split_eqs, moments.moments(), instruments)
    for name, col in extra_cols.items():
        for rid in RESIDUAL_IDS:
            split_eqs[rid][1][f"{name}:{rid}"] = col
            blocks.append((rid, f"extra:{name}", col))
            params.append(f"{name}:{rid}")
    fit = two_step_linear_gmm(
        {rid: eq[0] for rid, eq in split_eqs.items()},
        {rid: eq[1] for rid, eq in split_eqs.items()},
        blocks,
        cluster_ids,
        params,
        guard_params=5,
    )
    i1, i2 = params.index("mu#1"), params.index("mu#2")
    diff = float(fit.beta[i1] - fit.beta[i2])
    var = float(fit.vcov[i1, i1] + fit.vcov[i2, i2] - 2.0 * fit.vcov[i1, i2])
    if abs(diff) < _WALD_NUMERATOR_FLOOR:
        return 0.0, 1.0
    if var <= 0.0:
        return float("inf"), 0.0
    stat = diff * diff / var
    return stat, float(chi2.sf(stat, 1))


def _panel_sectors(panel: Panel, sectors) -> tuple[str, ...]:
    present = tuple(sorted({obs.sector for obs in panel.observations}))
    if sectors is None:
        return present
    if isinstance(sectors, str):
        sectors = (sectors,)
    out = tuple(sectors)
    for s in out:
        if s not in present:
            raise SchemaError(f"panel has no observations for sector {s!r}")
    return out


def estimate_gmm(
    panel: Panel,
    bartiks,
    gammas=None,
    moments: MomentSet | None = None,
    horizon: int = 5,
    extras=None,
    *,
    sectors=None,
    instruments: str = "bartik",
) -> dict[str, GmmResult]:
    """Joint two-step GMM of the four nest parameters, per sector.

    ``bartiks`` supplies shift-share instrument rows for the five inner
    factors (a mapping target -> rows, or a flat iterable of rows) built at
    the same ``horizon``; ``gammas`` optionally overrides the pseudo-aggregate
    weights (a {(country, sector): weights} or {sector: weights} mapping, or a
    single weights object; by default each run's own wage-bill means are
    used).  ``extras`` appends exogenous covariates, keyed
    name -> {(country, year): level}, to every equation in change form.
    ``instruments="regressors"`` replaces the shift-share columns with each
    equation's own regressors (useful for noise-free exactness checks).

    Returns one result per sector.  The over-identification entry is the
    equality Wald between the two routes to the outermost nest parameter for
    the most-relevant moment set, and the Hansen J statistic (degrees of
    freedom: moments minus parameters) for the full set.
    """
    moments = MomentSet.most_relevant() if moments is None else moments
    results: dict[str, GmmResult] = {}
    for sector in _panel_sectors(panel, sectors):
        frame = build_sector_frame(
            panel,
            bartiks,
            gammas,
            horizon,
            sector,
            need_instruments=(instruments == "bartik"),
        )
        equations = _four_level_equations(frame)
        extra_cols, dropped = _extra_columns(extras, frame)
        params = list(PARAM_ORDER)
        blocks = _moment_blocks(frame, equations, moments.moments(), instruments)
        for name, col in extra_cols.items():
            for rid in RESIDUAL_IDS:
                pname = f"{name}:{rid}"
                equations[rid][1][pname] = col
                params.append(pname)
                blocks.append((rid, f"extra:{name}", col))
        fit = two_step_linear_gmm(
            {rid: eq[0] for rid, eq in equations.items()},
            {rid: eq[1] for rid, eq in equations.items()},
            blocks,
            frame.cluster_ids(),
            params,
            guard_params=len(PARAM_ORDER),
        )
        base = [params.index(tag) for tag in PARAM_ORDER]
        sigma_hat = {tag: 1.0 - float(fit.beta[i]) for tag, i in zip(PARAM_ORDER, base)}
        vcov = fit.vcov[np.ix_(base, base)]
        if moments.kind == "most-relevant":
            wald, pvalue = _split_mu_wald(
                frame, _four_level_equations(frame), moments,
                frame.cluster_ids(), extra_cols, instruments,
            )
        else:
            wald = fit.j_stat
            pvalue = float(chi2.sf(wald, fit.j_df)) if fit.j_df > 0 else 1.0
        flags = list(fit.flags) + _boundary_flags(sigma_hat)
        flags += [f"covariate-dropped:{name}" for name in dropped]
        results[sector] = GmmResult(
            sigma_hat=sigma_hat,
            vcov=vcov,
            overid_wald=float(wald),
            overid_pvalue=float(pvalue),
            n_obs=fit.n_obs,
            n_clusters=fit.n_clusters,
            flags=tuple(flags),
        )
    return results


# ---------------------------------------------------------------------------
# Sequential identification
# ---------------------------------------------------------------------------


def _single_param_fit(
    y: np.ndarray,
    x: np.ndarray,
    blocks: list[tuple[str, str, np.ndarray]],
    cluster_ids,
    label: str,
) -> _EngineResult:
    return two_step_linear_gmm(
        {label: y}, {label: {label: x}},
        [(label, iid, z) for _, iid, z in blocks],
        cluster_ids,
        [label],
    )


def sequential_identify(
    panel: Panel,
    bartiks,
    gammas=None,
    horizon: int = 5,
    *,
    sectors=None,
    instruments: str = "bartik",
) -> dict[str, GmmResult]:
    """Nest-by-nest identification walk, innermost parameter first.

    Each step estimates one coefficient from its own equation with the
    previously identified coefficients substituted in.  The outermost
    parameter is identified twice — once from each of the two equations that
    carry it — and the result reports both just-identified estimates
    (``sigma_mu_split``), their standard errors, the jointly estimated value
    in ``sigma_hat``, and an equality Wald between the two routes as the
    over-identification entry.  The covariance treats plugged-in coefficients
    as fixed, so off-diagonal terms are zero by construction.
    """
    results: dict[str, GmmResult] = {}
    for sector in _panel_sectors(panel, sectors):
        frame = build_sector_frame(
            panel, bartiks, gammas, horizon, sector,
            need_instruments=(instruments == "bartik"),
        )
        c = frame.columns
        eqs = _four_level_equations(frame)
        ids = frame.cluster_ids()

        def z_for(rid: str, iid: str, x: np.ndarray):
            if instruments == "bartik":
                return [(rid, iid, _instrument_column(frame, iid))]
            return [(rid, f"x:{rid}", x)]

        # Innermost pair: ICT capital with skilled-female labor.
        y_fh, xs_fh = eqs["fh"]
        x = xs_fh["fh"]
        fit_fh = _single_param_fit(y_fh, x, z_for("fh", "Lfh^b-Ki^b", x), ids, "fh")
        b_fh = float(fit_fh.beta[0])

        # Second nest: skilled-male labor, plugging the first estimate.
        y_mh, xs_mh = eqs["mh"]
        y = y_mh - b_fh * xs_mh["fh"]
        x = xs_mh["mh"]
        fit_mh = _single_param_fit(y, x, z_for("mh", "D^b-Lmh^b", x), ids, "mh")
        b_mh = float(fit_mh.beta[0])

        # Third nest: unskilled-female labor.
        y_fu, xs_fu = eqs["fu"]
        y = y_fu - b_fh * xs_fu["fh"] - b_mh * xs_fu["mh"]
        x = xs_fu["fu"]
        fit_fu = _single_param_fit(y, x, z_for("fu", "C^b-Lfu^b", x), ids, "fu")
        b_fu = float(fit_fu.beta[0])

        # Outermost nest, identified from each carrying equation.
        y_m1, xs_m1 = eqs["mu1"]
        y1 = y_m1 - b_fu * xs_m1["fu"]
        x1 = xs_m1["mu"]
        fit_m1 = _single_param_fit(y1, x1, z_for("mu1", "B^b-Lmu^b", x1), ids, "mu")
        y_m2, xs_m2 = eqs["mu2"]
        y2 = y_m2 - b_mh * xs_m2["mh"] - b_fu * xs_m2["fu"]
        x2 = xs_m2["mu"]
        fit_m2 = _single_param_fit(y2, x2, z_for("mu2", "B^b-Lmu^b", x2), ids, "mu")

        joint = two_step_linear_gmm(
            {"mu1": y1, "mu2": y2},
            {"mu1": {"mu": x1}, "mu2": {"mu": x2}},
            z_for("mu1", "B^b-Lmu^b", x1) + z_for("mu2", "B^b-Lmu^b", x2),
            ids,
            ["mu"],
        )
        b_mu = float(joint.beta[0])

        sig1 = 1.0 - float(fit_m1.beta[0])
        sig2 = 1.0 - float(fit_m2.beta[0])
        se1 = math.sqrt(max(float(fit_m1.vcov[0, 0]), 0.0))
        se2 = math.sqrt(max(float(fit_m2.vcov[0, 0]), 0.0))
        diff = sig1 - sig2
        var = fit_m1.vcov[0, 0] + fit_m2.vcov[0, 0]
        if abs(diff) < _WALD_NUMERATOR_FLOOR:
            wald, pvalue = 0.0, 1.0
        elif var <= 0.0:
            wald, pvalue = float("inf"), 0.0
        else:
            wald = float(diff * diff / var)
            pvalue = float(chi2.sf(wald, 1))

        sigma_hat = {"fh": 1.0 - b_fh, "mh": 1.0 - b_mh, "fu": 1.0 - b_fu, "mu": 1.0 - b_mu}
        vcov = np.diag(
            [
                float(fit_fh.vcov[0, 0]),
                float(fit_mh.vcov[0, 0]),
                float(fit_fu.vcov[0, 0]),
                float(joint.vcov[0, 0]),
            ]
        )
        results[sector] = GmmResult(
            sigma_hat=sigma_hat,
            vcov=vcov,
            overid_wald=wald,
            overid_pvalue=pvalue,
            n_obs=joint.n_obs,
            n_clusters=joint.n_clusters,
            sigma_mu_split=(sig1, sig2),
            sigma_mu_split_se=(se1, se2),
            flags=tuple(_boundary_flags(sigma_hat)),
        )
    return results


# ---------------------------------------------------------------------------
# Preliminary wage-gap IV
# ---------------------------------------------------------------------------


_GAP_GROUPS = {
    "gender": (MALE_FACTORS, FEMALE_FACTORS, "Lm"),
    "skill": (SKILLED_FACTORS, UNSKILLED_FACTORS, "Lu"),
}


def _iv_2sls(
    y: np.ndarray, x: np.ndarray, z_mat: np.ndarray, cluster_ids
) -> tuple[float, float, float, int, int]:
    """Single-regressor 2SLS with clustered standard errors.

    Returns (beta, clustered se, first-stage F, n, clusters).  The first-stage
    F tests joint irrelevance of the instruments in the intercept-free first
    stage.
    """
    n = y.shape[0]
    clusters = _cluster_indices(cluster_ids)
    g_count = len(clusters)
    if g_count < 2:
        raise EstimationError(
            f"need at least two clusters for inference, got {g_count}"
        )
    ztz = z_mat.T @ z_mat
    pi_hat = np.linalg.pinv(ztz, rcond=_RCOND) @ (z_mat.T @ x)
    x_hat = z_mat @ pi_hat
    denom = float(x_hat @ x)
    if abs(denom) <= _RCOND * max(1.0, float(x @ x)):
        raise EstimationError("projected regressor has no variation; instruments irrelevant")
    beta = float(x_hat @ y) / denom
    resid = y - beta * x
    correction = g_count / (g_count - 1) if g_count > 1 else 1.0
    meat = 0.0
    for ix in clusters:
        u = float(x_hat[ix] @ resid[ix])
        meat += u * u
    se = math.sqrt(correction * meat) / abs(denom)

    k = z_mat.shape[1]
    ssr1 = float(np.sum((x - x_hat) ** 2))
    ssr0 = float(x @ x)
    if n <= k or ssr1 <= 0.0:
        f_stat = float("inf")
    else:
        f_stat = ((ssr0 - ssr1) / k) / (ssr1 / (n - k))
    return beta, se, f_stat, n, g_count


def preliminary_iv(
    panel: Panel,
    bartiks,
    horizon: int = 5,
    gap: str = "gender",
    *,
    sectors=None,
) -> dict[str, IvResult]:
    """Wage-gap IV regressions relating gap changes to ICT-capital deepening.

    For the requested ``gap`` the outcome is the long-difference of the log
    wage-bill ratio between the two labor groups (the relative-quantity term
    of the gap equation carries a fixed coefficient of minus one, so it moves
    to the left side as the bill ratio).  The single endogenous regressor is
    the level change of ICT capital per unit of the first group's labor,
    instrumented by the shift-share predictions for ICT capital and that
    group's labor.  The reported elasticity is the coefficient scaled by the
    sample mean ratio of ICT capital to group labor.  A first-stage F below
    one flags weak instruments (a warning is emitted; results are still
    reported).
    """
    if gap not in _GAP_GROUPS:
        raise SchemaError(f"unknown gap {gap!r}; expected 'gender' or 'skill'")
    group_a, group_b, target = _GAP_GROUPS[gap]
    z_values = _normalize_bartiks(bartiks)
    for need in ("Ki", target):
        if need not in z_values:
            raise SchemaError(
                f"instrument rows missing for target {need!r}; the {gap} gap "
                f"regression needs rows for 'Ki' and {target!r}"
            )
    horizon = int(horizon)
    if horizon < 1:
        raise SchemaError("horizon must be a positive number of years")

    results: dict[str, IvResult] = {}
    for sector in _panel_sectors(panel, sectors):
        levels = _sector_levels(panel, sector)
        ys, xs, z1s, z2s, cl = [], [], [], [], []
        ki_levels, la_levels = [], []
        for country in sorted(levels):
            by_year = levels[country]
            for year in sorted(by_year):
                cell = by_year[year]
                qa = sum(cell[f"q:{f.name}"] for f in group_a)
                ki_levels.append(cell["q:Ki"])
                la_levels.append(qa)
                prev = by_year.get(year - horizon)
                if prev is None:
                    continue
                key = (country, sector, year)
                if key not in z_values["Ki"] or key not in z_values[target]:
                    continue
                bill_a = sum(cell[f"b:{f.name}"] for f in group_a)
                bill_b = sum(cell[f"b:{f.name}"] for f in group_b)
                bill_a0 = sum(prev[f"b:{f.name}"] for f in group_a)
                bill_b0 = sum(prev[f"b:{f.name}"] for f in group_b)
                qa0 = sum(prev[f"q:{f.name}"] for f in group_a)
                ys.append(math.log(bill_a / bill_b) - math.log(bill_a0 / bill_b0))
                xs.append(cell["q:Ki"] / qa - prev["q:Ki"] / qa0)
                z1s.append(z_values["Ki"][key])
                z2s.append(z_values[target][key])
                cl.append(country)
        if not ys:
            raise EstimationError(
                f"no usable long-difference rows for sector {sector!r} at "
                f"horizon {horizon}"
            )
        y = np.asarray(ys)
        x = np.asarray(xs)
        z_mat = np.column_stack([z1s, z2s])
        beta, se, f_stat, n, g_count = _iv_2sls(y, x, z_mat, cl)
        ratio = float(np.mean(ki_levels) / np.mean(la_levels))
        flags: list[str] = []
        if f_stat < 1.0:
            flags.append("weak-instruments")
            warnings.warn(
                f"first-stage F {f_stat:.3g} < 1 for the {gap} gap in sector "
                f"{sector!r}; instruments look irrelevant",
                stacklevel=2,
            )
        results[sector] = IvResult(
            beta_hat=beta,
            se_clustered=se,
            first_stage_f=f_stat,
            elasticity_at_means=beta * ratio,
            elasticity_se=se * ratio,
            n_obs=n,
            n_clusters=g_count,
            flags=tuple(flags),
        )
    return results


# ---------------------------------------------------------------------------
# Consumption-side substitution elasticity
# ---------------------------------------------------------------------------


def _consumption_rows(panel: Panel) -> list[dict]:
    """Sector expenditure shares, prices, and wage indices from a panel.

    The expenditure share of a sector is its nominal output value over the
    country total; the price is the output-value-weighted deflator; the wage
    instrument is labor compensation per unit of labor.
    """
    levels: dict[str, dict[int, dict[str, dict[str, float]]]] = defaultdict(
        lambda: defaultdict(dict)
    )
    for obs in panel.observations:
        if not _usable(obs):
            continue
        cell = levels[obs.country][obs.year].setdefault(
            obs.sector, defaultdict(float)
        )
        cell["value"] += obs.output_value
        cell["deflator_sum"] += obs.output_deflator * obs.output_value
        cell["labor_bill"] += obs.labor_compensation()
        cell["labor_quantity"] += sum(
            obs.factor_quantity[f] for f in LABOR_FACTORS
        )
    rows: list[dict] = []
    for country in sorted(levels):
        for year in sorted(levels[country]):
            sectors = levels[country][year]
            total = sum(cell["value"] for cell in sectors.values())
            for sector in sorted(sectors):
                cell = sectors[sector]
                rows.append(
                    {
                        "country": country,
                        "sector": sector,
                        "year": year,
                        "share": cell["value"] / total,
                        "price": cell["deflator_sum"] / cell["value"],
                        "wage": cell["labor_bill"] / cell["labor_quantity"],
                    }
                )
    return rows


def consumption_elasticity(
    data, horizon: int = 5, trend: str = "country-linear"
) -> IvResult:
    """IV estimate of the demand-side substitution elasticity.

    Regresses long-differences of log sector expenditure shares on
    long-differences of log sector prices, instrumenting the price change
    with the wage change; the slope identifies one minus the inverse demand
    elasticity, and ``elasticity_at_means`` reports the elasticity itself
    (one minus the slope).  ``trend`` controls the drift terms: ``"none"``,
    ``"linear"`` (one common drift), or ``"country-linear"`` (one drift per
    country, absorbed by within-country demeaning of the differenced data).
    Standard errors are clustered by (country, sector).

    ``data`` is either a panel (shares, prices, and wage indices are derived
    from output values, deflators, and labor compensation) or an iterable of
    mappings with keys country, sector, year, share, price, wage.
    """
    if trend not in ("none", "linear", "country-linear"):
        raise SchemaError(
            f"unknown trend option {trend!r}; expected 'none', 'linear', or "
            "'country-linear'"
        )
    horizon = int(horizon)
    if horizon < 1:
        raise SchemaError("horizon must be a positive number of years")
    rows = _consumption_rows(data) if isinstance(data, Panel) else [dict(r) for r in data]
    series: dict[tuple[str, str], dict[int, dict]] = defaultdict(dict)
    for r in rows:
        series[(str(r["country"]), str(r["sector"]))][int(r["year"])] = r

    ys, xs, zs, countries, pair_ids = [], [], [], [], []
    for (country, sector), by_year in sorted(series.items()):
        for year in sorted(by_year):
            prev = by_year.get(year - horizon)
            if prev is None:
                continue
            now = by_year[year]
            ys.append(math.log(now["share"]) - math.log(prev["share"]))
            xs.append(math.log(now["price"]) - math.log(prev["price"]))
            zs.append(math.log(now["wage"]) - math.log(prev["wage"]))
            countries.append(country)
            pair_ids.append((country, sector))
    if not ys:
        raise EstimationError(
            f"no usable long-difference rows at horizon {horizon}"
        )
    y = np.asarray(ys)
    x = np.asarray(xs)
    z = np.asarray(zs)

    if trend == "linear":
        # One common drift: partial a constant out of every column.
        for col in (y, x, z):
            col -= col.mean()
    elif trend == "country-linear":
        codes = np.asarray(countries, dtype=object)
        for country in sorted(set(countries)):
            mask = codes == country
            for col in (y, x, z):
                col[mask] -= col[mask].mean()

    beta, se, f_stat, n, g_count = _iv_2sls(y, x, z[:, None], pair_ids)
    flags: list[str] = []
    if f_stat < 1.0:
        flags.append("weak-instruments")
        warnings.warn(
            f"first-stage F {f_stat:.3g} < 1 in the consumption-share "
            "regression; the wage instrument looks irrelevant",
            stacklevel=2,
        )
    return IvResult(
        beta_hat=beta,
        se_clustered=se,
        first_stage_f=f_stat,
        elasticity_at_means=1.0 - beta,
        elasticity_se=se,
        n_obs=n,
        n_clusters=g_count,
        flags=tuple(flags),
    )


# ---------------------------------------------------------------------------
# Specification ladder
# ---------------------------------------------------------------------------


def equality_wald(
    estimates: Mapping[str, float],
    vcov: np.ndarray,
    labels: Sequence[str],
    left: str,
    right: str,
) -> EqualityTest:
    """Pairwise Wald test of equality between two estimated parameters.

    A parameter tested against itself yields a statistic of exactly zero, as
    does a difference below estimation precision.
    """
    if left == right:
        return EqualityTest(left, right, 0.0, 1.0)
    i, j = list(labels).index(left), list(labels).index(right)
    diff = float(estimates[left] - estimates[right])
    var = float(vcov[i, i] + vcov[j, j] - 2.0 * vcov[i, j])
    if abs(diff) < _WALD_NUMERATOR_FLOOR:
        return EqualityTest(left, right, 0.0, 1.0)
    if var <= 0.0:
        return EqualityTest(left, right, float("inf"), 0.0)
    stat = diff * diff / var
    return EqualityTest(left, right, stat, float(chi2.sf(stat, 1)))


_LADDER_WALD_PAIRS = {
    1: (("fh", "mh"), ("mh", "fu"), ("fu", "mu")),
    2: (("fh", "mh"), ("fh", "fu"), ("fh", "mu"), ("mh", "fu"), ("fu", "mu")),
    3: (("fh", "mh"), ("mh", "fu"), ("mh", "mu"), ("fu", "mu")),
    4: (("fh", "mh"), ("mh", "fu"), ("fu", "mu")),
}

# How to test a shallower technology against the next-deeper one: each level
# maps to the rung whose Wald table carries the test and the coefficient
# pairs that the shallower technology forces to be equal.  The deeper rung
# estimates both sides of each pair without the shallower pooling, so these
# tests keep their power when the pooling is wrong.  A level is rejected
# when any listed pair differs significantly.
LADDER_LEVEL_TESTS: dict[int, tuple[int, tuple[tuple[str, str], ...]]] = {
    1: (2, (("fh", "mh"), ("fh", "fu"), ("fh", "mu"))),
    2: (3, (("mh", "fu"), ("mh", "mu"))),
    3: (4, (("fu", "mu"),)),
}


def _ladder_systems(
    frame: SectorFrame,
) -> dict[int, tuple[dict, list[tuple[str, str]]]]:
    """Equations and ratio-instrument pairs for each rung of the ladder."""
    c = frame.columns
    d_ki = c["Ki"]
    d_l = {tag: c[_WAGE_KEYS[tag].name] for tag in PARAM_ORDER}
    w = {tag: c[f"w:{tag}"] for tag in PARAM_ORDER}
    r_i = c["r_i"]
    d_nd, d_nc = c["D"], c["C"]
    l_name = {tag: _WAGE_KEYS[tag].name for tag in PARAM_ORDER}

    one = {
        tag: (w[tag] - r_i, {tag: d_ki - d_l[tag]}) for tag in PARAM_ORDER
    }
    one_m = [(tag, f"{l_name[tag]}^b-Ki^b") for tag in PARAM_ORDER]

    two = {"fh": (w["fh"] - r_i, {"fh": d_ki - d_l["fh"]})}
    two_m = [("fh", "Lfh^b-Ki^b")]
    for tag in ("mh", "fu", "mu"):
        two[tag] = (
            w[tag] - w["fh"],
            {tag: d_nd - d_l[tag], "fh": -(d_nd - d_l["fh"])},
        )
        two_m.append((tag, f"D^b-{l_name[tag]}^b"))

    three = {
        "fh": (w["fh"] - r_i, {"fh": d_ki - d_l["fh"]}),
        "mh": (
            w["mh"] - w["fh"],
            {"mh": d_nd - d_l["mh"], "fh": -(d_nd - d_l["fh"])},
        ),
    }
    three_m = [("fh", "Lfh^b-Ki^b"), ("mh", "D^b-Lmh^b")]
    for tag in ("fu", "mu"):
        three[tag] = (
            w[tag] - w["fh"],
            {
                tag: d_nc - d_l[tag],
                "fh": -(d_nd - d_l["fh"]),
                "mh": -(d_nc - d_nd),
            },
        )
        three_m.append((tag, f"C^b-{l_name[tag]}^b"))

    four = _four_level_equations(frame)
    four_m = [(rid, iid) for rid, iid in MomentSet.most_relevant().moments()]
    return {1: (one, one_m), 2: (two, two_m), 3: (three, three_m), 4: (four, four_m)}


def specification_ladder(
    panel: Panel,
    bartiks,
    gammas=None,
    horizon: int = 5,
    *,
    sectors=None,
    instruments: str = "bartik",
) -> dict[str, tuple[LadderPanel, ...]]:
    """Estimate one- through four-level technologies and test parameter equality.

    Each rung fits the factor-price-ratio system implied by a technology of
    that nesting depth (a single inner nest pooling ICT capital with all four
    labor types, then successively deeper nests) by the same two-step GMM and
    reports pairwise equality Walds with country-clustered covariance.  A
    rung's own validity implies the equality of its higher-nest parameters,
    so rejected equalities argue for a deeper technology.
    """
    results: dict[str, tuple[LadderPanel, ...]] = {}
    for sector in _panel_sectors(panel, sectors):
        frame = build_sector_frame(
            panel, bartiks, gammas, horizon, sector,
            need_instruments=(instruments == "bartik"),
        )
        systems = _ladder_systems(frame)
        panels: list[LadderPanel] = []
        for level in (1, 2, 3, 4):
            equations, moment_pairs = systems[level]
            blocks = _moment_blocks(frame, equations, moment_pairs, instruments)
            fit = two_step_linear_gmm(
                {rid: eq[0] for rid, eq in equations.items()},
                {rid: eq[1] for rid, eq in equations.items()},
                blocks,
                frame.cluster_ids(),
                list(PARAM_ORDER),
            )
            estimates = {
                tag: 1.0 - float(fit.beta[i]) for i, tag in enumerate(PARAM_ORDER)
            }
            ses = {
                tag: math.sqrt(max(float(fit.vcov[i, i]), 0.0))
                for i, tag in enumerate(PARAM_ORDER)
            }
            walds = tuple(
                equality_wald(estimates, fit.vcov, PARAM_ORDER, a, b)
                for a, b in _LADDER_WALD_PAIRS[level]
            )
            panels.append(
                LadderPanel(
                    level=level,
                    estimates=estimates,
                    std_errors=ses,
                    walds=walds,
                    n_obs=fit.n_obs,
                    n_clusters=fit.n_clusters,
                )
            )
        results[sector] = tuple(panels)
    return results


# ---------------------------------------------------------------------------
# Robustness variants
# ---------------------------------------------------------------------------


_INSTITUTION_COLUMNS = (
    "bargaining_coverage",
    "epl",
    "minwage_present",
    "minwage_level",
)


def load_institutions(path) -> dict[str, dict[tuple[str, int], float]]:
    """Read labor-market institution covariates from CSV.

    The file carries columns country, year, bargaining_coverage, epl,
    minwage_present, minwage_level; the result maps each covariate name to a
    {(country, year): value} series suitable for the ``extras`` argument.
    """
    out: dict[str, dict[tuple[str, int], float]] = {
        name: {} for name in _INSTITUTION_COLUMNS
    }
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        need = {"country", "year", *_INSTITUTION_COLUMNS}
        have = set(reader.fieldnames or ())
        if not need.issubset(have):
            raise SchemaError(
                f"institutions file is missing columns {sorted(need - have)}"
            )
        for row_no, row in enumerate(reader, start=2):
            try:
                key = (row["country"], int(row["year"]))
                for name in _INSTITUTION_COLUMNS:
                    out[name][key] = float(row[name])
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"institutions row {row_no}: {exc}") from exc
    return out


def _ordering_flags(sigma_hat: Mapping[str, float]) -> list[str]:
    flags = []
    for a, b in zip(PARAM_ORDER, PARAM_ORDER[1:]):
        if not (sigma_hat[a] < sigma_hat[b]):
            flags.append(f"sigma-order-violated:{a}>={b}")
    return flags


def _trend_partial_out(
    frame: SectorFrame,
    columns: dict[str, np.ndarray],
    orders: Mapping[str, int],
) -> dict[str, np.ndarray]:
    """Remove country-specific polynomial drift from every data column.

    A country with trend order p contributes drift terms that are the
    long-differences of year powers 1..p; projecting them out of the outcome,
    regressor, and instrument columns de-trends the system without adding
    jointly estimated parameters (order 1 reduces to within-country
    demeaning of the differenced data).
    """
    out = {k: v.copy() for k, v in columns.items()}
    keys = sorted(out)
    codes = np.asarray(frame.countries, dtype=object)
    years = np.asarray(frame.years, dtype=float)
    h = float(frame.horizon)
    for country in sorted(set(frame.countries)):
        order = int(orders.get(country, 0))
        if order <= 0:
            continue
        mask = codes == country
        t_now = years[mask]
        design = np.column_stack(
            [t_now**k - (t_now - h) ** k for k in range(1, order + 1)]
        )
        block = np.column_stack([out[k][mask] for k in keys])
        coef, *_ = np.linalg.lstsq(design, block, rcond=None)
        block -= design @ coef
        for idx, key in enumerate(keys):
            out[key][mask] = block[:, idx]
    return out


def _bic_trend_orders(
    frame: SectorFrame, residuals: np.ndarray, max_order: int = 3
) -> dict[str, int]:
    """Per-country drift order chosen by BIC on stacked equation residuals.

    ``residuals`` is (rows, equations): the residual drift left by the
    baseline fit.  Ties prefer the smaller order, so a system the baseline
    already fits exactly keeps order zero everywhere.
    """
    ys = residuals
    codes = np.asarray(frame.countries, dtype=object)
    years = np.asarray(frame.years, dtype=float)
    h = float(frame.horizon)
    orders: dict[str, int] = {}
    for country in sorted(set(frame.countries)):
        mask = codes == country
        stacked = ys[mask].ravel(order="F")
        m = stacked.size
        best_order, best_bic = 0, None
        for order in range(0, max_order + 1):
            if order == 0:
                ssr = float(stacked @ stacked)
                k = 0
            else:
                t_now = years[mask]
                design_one = np.column_stack(
                    [t_now**k - (t_now - h) ** k for k in range(1, order + 1)]
                )
                if design_one.shape[0] <= design_one.shape[1]:
                    break
                design = np.kron(np.eye(ys.shape[1]), design_one)
                coef, *_ = np.linalg.lstsq(design, stacked, rcond=None)
                resid = stacked - design @ coef
                ssr = float(resid @ resid)
                k = design.shape[1]
            bic = m * math.log(max(ssr, 1e-300) / m) + k * math.log(m)
            if best_bic is None or bic < best_bic - 1e-12:
                best_order, best_bic = order, bic
        orders[country] = best_order
    return orders


def robustness_variant(
    panel: Panel,
    bartiks,
    gammas=None,
    moments: MomentSet | None = None,
    horizon: int = 5,
    variant: str = "institutions",
    *,
    covariates=None,
    depreciation=None,
    cpi=None,
    trend_order: int | None = None,
    sectors=None,
    instruments: str = "bartik",
) -> dict[str, GmmResult]:
    """Re-estimate the system under one robustness variant.

    ``"institutions"`` appends the supplied covariates (name ->
    {(country, year): level}) to every equation in change form;
    ``"external-return"`` recomputes capital rentals with the external
    rate-of-return rule (requires ``depreciation`` and ``cpi``) and re-runs
    the baseline; ``"trend-polynomials"`` partials country-specific
    polynomial drift out of every column, with the per-country order chosen
    by BIC over 0..3 unless ``trend_order`` forces one.  Every result is
    checked against the expected ordering of the nest parameters
    (innermost smallest); violations are flagged, not raised.
    """
    moments = MomentSet.most_relevant() if moments is None else moments
    if variant == "institutions":
        if not covariates:
            raise SchemaError(
                "the institutions variant needs covariate series; pass "
                "covariates=load_institutions(path) or a compatible mapping"
            )
        results = estimate_gmm(
            panel, bartiks, gammas, moments, horizon, covariates,
            sectors=sectors, instruments=instruments,
        )
    elif variant == "external-return":
        from .panel import rental_price_external

        if depreciation is None or cpi is None:
            raise SchemaError(
                "the external-return variant needs depreciation rates and a "
                "consumer-price series"
            )
        adjusted = rental_price_external(panel, depreciation, cpi)
        results = estimate_gmm(
            adjusted, bartiks, gammas, moments, horizon,
            sectors=sectors, instruments=instruments,
        )
    elif variant == "trend-polynomials":
        results = {}
        for sector in _panel_sectors(panel, sectors):
            frame = build_sector_frame(
                panel, bartiks, gammas, horizon, sector,
                need_instruments=(instruments == "bartik"),
            )
            if trend_order is None:
                base_eqs = _four_level_equations(frame)
                base_blocks = _moment_blocks(
                    frame, base_eqs, moments.moments(), instruments
                )
                base_fit = two_step_linear_gmm(
                    {rid: eq[0] for rid, eq in base_eqs.items()},
                    {rid: eq[1] for rid, eq in base_eqs.items()},
                    base_blocks,
                    frame.cluster_ids(),
                    list(PARAM_ORDER),
                )
                beta_by = dict(zip(PARAM_ORDER, base_fit.beta))
                resid = np.column_stack(
                    [
                        base_eqs[rid][0]
                        - sum(
                            beta_by[p] * col
                            for p, col in base_eqs[rid][1].items()
                        )
                        for rid in RESIDUAL_IDS
                    ]
                )
                orders = _bic_trend_orders(frame, resid)
            else:
                orders = {c: int(trend_order) for c in set(frame.countries)}
            detrended = _trend_partial_out(frame, dict(frame.columns), orders)
            new_frame = SectorFrame(
                sector=frame.sector,
                countries=frame.countries,
                years=frame.years,
                columns=detrended,
                horizon=frame.horizon,
            )
            equations = _four_level_equations(new_frame)
            blocks = _moment_blocks(
                new_frame, equations, moments.moments(), instruments
            )
            fit = two_step_linear_gmm(
                {rid: eq[0] for rid, eq in equations.items()},
                {rid: eq[1] for rid, eq in equations.items()},
                blocks,
                new_frame.cluster_ids(),
                list(PARAM_ORDER),
            )
            sigma_hat = {
                tag: 1.0 - float(fit.beta[i]) for i, tag in enumerate(PARAM_ORDER)
            }
            if moments.kind == "most-relevant":
                wald, pvalue = _split_mu_wald(
                    new_frame, _four_level_equations(new_frame), moments,
                    new_frame.cluster_ids(), {}, instruments,
                )
            else:
                wald = fit.j_stat
                pvalue = float(chi2.sf(wald, fit.j_df)) if fit.j_df > 0 else 1.0
            results[sector] = GmmResult(
                sigma_hat=sigma_hat,
                vcov=fit.vcov,
                overid_wald=float(wald),
                overid_pvalue=float(pvalue),
                n_obs=fit.n_obs,
                n_clusters=fit.n_clusters,
                flags=tuple(fit.flags) + tuple(_boundary_flags(sigma_hat)),
            )
    else:
        raise SchemaError(
            f"unknown robustness variant {variant!r}; expected 'institutions', "
            "'external-return', or 'trend-polynomials'"
        )

    flagged: dict[str, GmmResult] = {}
    for sector, res in results.items():
        extra = _ordering_flags(res.sigma_hat)
        if extra:
            res = GmmResult(
                sigma_hat=res.sigma_hat,
                vcov=res.vcov,
                overid_wald=res.overid_wald,
                overid_pvalue=res.overid_pvalue,
                n_obs=res.n_obs,
                n_clusters=res.n_clusters,
                sigma_mu_split=res.sigma_mu_split,
                sigma_mu_split_se=res.sigma_mu_split_se,
                flags=res.flags + tuple(extra),
            )
        flagged[sector] = res
    return flagged
