"""Structural extrapolation away from the approval cutoff.

For each observed referendum the estimated model is re-run on a grid of
proposed spending changes.  Every grid point yields an expected vote margin
and a pair of equilibria, so arc elasticities can be averaged in bins of the
simulated margin, far from the narrow window the RDD uses.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .dgp import ReferendumDataset
from .equilibrium import SolverConfig, solve_batch
from .errors import InsufficientDraws
from .ident import calibrate_location_effects
from .mle import TurnoutData, draw_zeta, fit_turnout, unpack
from .model import Economy, HouseholdType, myopic_vote_deltas, utility_matrix
from .voting import ANTICIPATION_MODES, margins_from_deltas

SIMULATION_GRID = (0.01, 0.40, 20)
APPLICATION_GRID = (0.01, 0.16, 75)


def make_grid(low=0.01, high=0.40, n=20) -> np.ndarray:
    grid = np.linspace(low, high, int(n))
    check_grid(grid)
    return grid


def check_grid(grid):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("grid must be a non-empty 1-d array")
    if np.any(~(grid > 0)) or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing and positive")
    return grid


@dataclass(frozen=True)
class CounterfactualRecord:
    referendum: int
    dlogG: float
    margin: float
    potentials: dict       # outcome -> (Z(0), Z(dG))
    elasticities: dict     # outcome -> arc elasticity


@dataclass
class CounterfactualSet:
    """Extrapolated values for ``R`` referenda and ``n`` grid points, stored as arrays."""

    referendum: np.ndarray     # (R,)
    grid: np.ndarray           # (n,)
    margin: np.ndarray         # (R, n)
    baseline: dict             # outcome -> (R,)
    treated: dict              # outcome -> (R, n)
    valid: np.ndarray          # (R, n)

    @property
    def shape(self):
        return self.margin.shape

    def elasticity(self, outcome="P") -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            e = (np.log(self.treated[outcome]) - np.log(self.baseline[outcome])[:, None]) / self.grid
        return np.where(self.valid, e, np.nan)

    def records(self) -> list:
        out = []
        names = list(self.baseline)
        for r in range(self.shape[0]):
            for i, d in enumerate(self.grid):
                if not self.valid[r, i]:
                    continue
                pots = {z: (float(self.baseline[z][r]), float(self.treated[z][r, i])) for z in names}
                el = {z: (np.log(b1) - np.log(b0)) / d for z, (b0, b1) in pots.items()}
                out.append(CounterfactualRecord(int(self.referendum[r]), float(d),
                                                float(self.margin[r, i]), pots, el))
        return out


def outcome_arrays(state, district) -> dict:
    """Outcomes of the referendum district from a batched state."""
    rows = np.arange(np.shape(state.P)[0])
    d = {"P": state.P[rows, district], "H": state.H[rows, district],
         "tau": state.tau[rows, district], "G": state.G[rows, district],
         "N": state.N[rows, district]}
    for k in range(state.Nk.shape[1]):
        d[f"N{k + 1}"] = state.Nk[rows, k, district]
    return d


def simulate_counterfactual_grid(economy: Economy, G, district, grid, mode="myopic",
                                 solver: SolverConfig | None = None):
    """Baseline and treated equilibria for every referendum and grid point.

    ``G`` holds pre-vote spending, shape ``(R, J)``.  Returns
    ``(baseline_state, treated_outcomes, dv, valid)`` where ``dv`` has shape
    ``(R, n, K)``.  Failed solves are flagged invalid rather than raised.
    """
    if mode not in ANTICIPATION_MODES:
        raise ValueError(f"anticipation mode must be one of {ANTICIPATION_MODES}")
    grid = check_grid(grid)
    G = np.atleast_2d(np.asarray(G, dtype=float))
    district = np.asarray(district, dtype=int)
    R, n, K = G.shape[0], grid.size, economy.n_types
    rows = np.arange(R)
    base, ok0 = solve_batch(economy, G, solver)
    treated = {}
    valid = np.zeros((R, n), dtype=bool)
    dv = np.full((R, n, K), np.nan)
    if mode == "full":
        v0 = utility_matrix(economy.alpha, economy.gamma, economy.y, economy.A_bar, base.G, base.N,
                            base.P, base.tau, economy.chi)[rows, :, district]
    for i, d in enumerate(grid):
        G1 = base.G.copy()
        G1[rows, district] *= np.exp(d)
        st, ok1 = solve_batch(economy, G1, solver, warm_start=base)
        valid[:, i] = ok0 & ok1
        for name, arr in outcome_arrays(st, district).items():
            treated.setdefault(name, np.empty((R, n)))[:, i] = arr
        if mode == "full":
            v1 = utility_matrix(economy.alpha, economy.gamma, economy.y, economy.A_bar, st.G, st.N,
                                st.P, st.tau, economy.chi)[rows, :, district]
            dv[:, i] = v1 - v0
        else:
            dv[:, i] = myopic_vote_deltas(economy.alpha, economy.gamma, economy.y,
                                          base.P[rows, district], base.tau[rows, district], d)
    return base, treated, dv, valid


# ---------------------------------------------------------------------------
# binned averages


@dataclass
class AveCurve:
    edges: np.ndarray        # left edges
    kappa: float
    mean: np.ndarray
    count: np.ndarray
    variance: np.ndarray | None = None

    @property
    def centers(self):
        return self.edges + 0.5 * self.kappa

    def to_frame(self):
        import pandas as pd

        cols = {"bin_left": self.edges, "bin_center": self.centers, "mean": self.mean,
                "count": self.count}
        if self.variance is not None:
            cols["variance"] = self.variance
        return pd.DataFrame(cols)


def bin_edges(kappa) -> np.ndarray:
    if not kappa > 0:
        raise ValueError("bin width must be positive")
    n = int(np.ceil(1.0 / kappa - 1e-9))
    return -0.5 + kappa * np.arange(n)


def bin_index(margin, edges) -> np.ndarray:
    """Left-closed bins; the top margin 0.5 joins the last bin."""
    idx = np.searchsorted(edges, np.asarray(margin, float), side="right") - 1
    return np.clip(idx, 0, edges.size - 1)


def binned_ave(margin, values, kappa=0.005) -> AveCurve:
    """Mean of ``values`` in bins ``[b, b + kappa)`` of the margin; empty bins are nan."""
    S = np.ravel(np.asarray(margin, float))
    V = np.ravel(np.asarray(values, float))
    keep = np.isfinite(S) & np.isfinite(V) & (S >= -0.5) & (S <= 0.5)
    edges = bin_edges(kappa)
    idx = bin_index(S[keep], edges)
    count = np.bincount(idx, minlength=edges.size)
    total = np.bincount(idx, weights=V[keep], minlength=edges.size)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / count, np.nan)
    return AveCurve(edges=edges, kappa=float(kappa), mean=mean, count=count)


def binned_margin_by_grid(cset: CounterfactualSet) -> np.ndarray:
    """Average simulated margin at each grid point."""
    S = np.where(cset.valid, cset.margin, np.nan)
    return np.nanmean(S, axis=0)


def monotonicity_violations(values) -> float:
    """Share of adjacent pairs that increase."""
    v = np.asarray(values, float)
    v = v[np.isfinite(v)]
    if v.size < 2:
        return 0.0
    return float(np.mean(np.diff(v) > 0))


# ---------------------------------------------------------------------------
# pipeline


def estimated_economy(ds: ReferendumDataset, zeta, eta, turnout_params=None, chi=1.0,
                      n_calibration=100, common_slope=False) -> Economy:
    """Economy implied by the estimates, with location effects matched to pre-vote snapshots.

    Utilities are in units of the logit scale (``theta = 1``).  Amenities and
    productivities are averaged over up to ``n_calibration`` snapshots.
    """
    z = np.asarray(zeta, float).reshape(-1, 2)
    K = z.shape[0]
    if turnout_params is None:
        mu0, mu1, s0 = np.zeros(K), np.zeros(K), np.ones(K)
    else:
        mu0, mu1, s0 = _turnout_levels(turnout_params, K, common_slope)
    pre = ds.pre
    take = np.unique(np.linspace(0, len(ds) - 1, min(n_calibration, len(ds))).astype(int))
    locs = [calibrate_location_effects(pre.Nk[i], z[:, 0], z[:, 1], pre.P[i], pre.tau[i], pre.G[i],
                                       ds.y, ds.sigma, chi, eta) for i in take]
    A_bar = np.mean([l.A_bar for l in locs], axis=0)
    B = np.mean([l.B for l in locs], axis=0)
    lam = float(np.mean([l.lam for l in locs]))
    types = [HouseholdType(alpha=z[k, 0], gamma=z[k, 1], y=float(ds.y[k]), sigma=float(ds.sigma[k]),
                           theta=1.0, mu0=float(mu0[k]), mu1=float(mu1[k]), sigma0=float(s0[k]),
                           beta=0.0)
             for k in range(K)]
    return Economy.from_arrays(A_bar, B, pre.G[take[0]], types, eta=float(eta), lam=lam, chi=chi)


class ExtrapolationPipeline:
    """Maps estimates to AVE curves, caching equilibria by ``(zeta, eta)``.

    Turnout parameters only move the simulated margins, so draws that keep
    ``zeta`` fixed reuse the cached equilibria.
    """

    def __init__(self, ds: ReferendumDataset, grid=None, mode="myopic", kappa=0.005, outcome="P",
                 chi=1.0, solver: SolverConfig | None = None, cache_size=2):
        self.ds = ds
        self.grid = check_grid(make_grid(*SIMULATION_GRID) if grid is None else grid)
        self.mode = mode
        self.kappa = kappa
        self.outcome = outcome
        self.chi = chi
        self.solver = solver
        self.cache_size = cache_size
        self._cache: OrderedDict = OrderedDict()
        self.cache_hits = 0

    def _key(self, zeta, eta):
        return np.round(np.r_[np.asarray(zeta, float).ravel(), float(eta)], 12).tobytes()

    def equilibria(self, zeta, eta):
        key = self._key(zeta, eta)
        if key in self._cache:
            self._cache.move_to_end(key)
            self.cache_hits += 1
            return self._cache[key]
        econ = estimated_economy(self.ds, zeta, eta, chi=self.chi)
        base, treated, dv, valid = simulate_counterfactual_grid(
            econ, self.ds.pre.G, self.ds.district, self.grid, self.mode, self.solver)
        entry = (outcome_arrays(base, self.ds.district), treated, dv, valid,
                 base.Nk[np.arange(len(self.ds)), :, self.ds.district])
        self._cache[key] = entry
        while len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return entry

    def counterfactuals(self, zeta, eta, turnout_params, common_slope=False) -> CounterfactualSet:
        base, treated, dv, valid, Nk_j = self.equilibria(zeta, eta)
        K = Nk_j.shape[1]
        mu0, mu1, s0 = _turnout_levels(turnout_params, K, common_slope)
        S, _, _ = margins_from_deltas(Nk_j[:, None, :], dv, self.grid[None, :], mu0, mu1, s0,
                                      strict=False)
        ok = valid & np.isfinite(S)
        return CounterfactualSet(referendum=self.ds.referendum.copy(), grid=self.grid, margin=S,
                                 baseline=base, treated=treated, valid=ok)

    def curve(self, zeta, eta, turnout_params, outcome=None, common_slope=False) -> AveCurve:
        cs = self.counterfactuals(zeta, eta, turnout_params, common_slope)
        e = cs.elasticity(outcome or self.outcome)
        return binned_ave(np.where(cs.valid, cs.margin, np.nan), e, self.kappa)


def _turnout_levels(params, K, common_slope=False):
    """``(mu0, mu1, sigma0)`` per type from level parameters.

    The layout is ``mu0`` (K), then ``mu1`` (K, or 1 when ``common_slope``),
    then one or ``K`` dispersions.
    """
    p = np.asarray(params, float)
    ns = 1 if common_slope else K
    s0 = p[K + ns:]
    if s0.size not in (1, K):
        raise ValueError(f"cannot read {p.size} turnout parameters for {K} types")
    return p[:K], np.broadcast_to(p[K:K + ns], (K,)), np.broadcast_to(s0, (K,))


# ---------------------------------------------------------------------------
# nested parametric bootstrap


@dataclass
class BootstrapVariance:
    within: np.ndarray
    between: np.ndarray
    total: np.ndarray
    n_outer: np.ndarray      # per-bin count of outer draws with a value
    outer_means: np.ndarray = field(repr=False, default=None)


def nested_bootstrap_variance(outer_draw, evaluate, inner_draw, n_outer, n_inner, seed=0):
    """Two-level parametric bootstrap for a vector statistic.

    ``outer_draw(rng)`` returns an outer state; ``evaluate(state, inner)``
    returns the statistic at inner parameters (``inner=None`` means the outer
    state's own estimate); ``inner_draw(state, rng)`` draws inner parameters.
    Within variance is the mean over outer draws of the inner variance; the
    between variance is the variance of the outer statistics; the total is
    ``within + (1 + 1/m) between``.  Bins missing in some draws use the
    available ones.
    """
    if n_outer < 2 or n_inner < 2:
        raise InsufficientDraws("need at least two outer and two inner draws")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    outer_vals, inner_vars = [], []
    for child in root.spawn(n_outer):
        o_seed, i_seed = child.spawn(2)
        state = outer_draw(np.random.default_rng(o_seed))
        outer_vals.append(np.asarray(evaluate(state, None), float))
        irng = np.random.default_rng(i_seed)
        inner = np.array([evaluate(state, inner_draw(state, irng)) for _ in range(n_inner)], float)
        inner_vars.append(_nanvar(inner))
    outer_vals = np.array(outer_vals)
    inner_vars = np.array(inner_vars)
    with np.errstate(invalid="ignore"), _quiet():
        within = np.nanmean(inner_vars, axis=0)
    between = _nanvar(outer_vals)
    n_ok = np.isfinite(outer_vals).sum(axis=0)
    m = np.where(n_ok > 0, n_ok, np.nan)
    total = within + (1 + 1 / m) * between
    return BootstrapVariance(within=within, between=between, total=total, n_outer=n_ok,
                             outer_means=outer_vals)


class _quiet:
    def __enter__(self):
        import warnings

        self._w = warnings.catch_warnings()
        self._w.__enter__()
        warnings.simplefilter("ignore", RuntimeWarning)

    def __exit__(self, *exc):
        return self._w.__exit__(*exc)


def _nanvar(a):
    """Column variance (ddof 1) over finite entries; nan with fewer than two."""
    a = np.asarray(a, float)
    n = np.isfinite(a).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"), _quiet():
        v = np.nanvar(a, axis=0, ddof=1)
    return np.where(n >= 2, v, np.nan)


def extrapolation_bootstrap(pipeline: ExtrapolationPipeline, turnout_ds: ReferendumDataset,
                            zeta_hat, zeta_cov, eta_hat, n_outer=20, n_inner=10, seed=0,
                            common_sigma=True, outcome=None, common_slope=False) -> AveCurve:
    """AVE curve at the estimates with nested-bootstrap total variance.

    Outer draws redraw ``zeta`` and refit the turnout model; inner draws
    redraw the turnout parameters from their estimated sampling distribution.
    The housing supply elasticity is held at its estimate.
    """
    outcome = outcome or pipeline.outcome
    kw = dict(common_sigma=common_sigma, common_slope=common_slope)
    base_fit = fit_turnout(TurnoutData.from_dataset(turnout_ds, zeta_hat), **kw)
    K = len(np.asarray(zeta_hat)) // 2

    def levels(raw):
        mu0, mu1, s0 = unpack(raw, K, common_sigma, common_slope)
        return np.r_[mu0, mu1, s0]

    point = pipeline.curve(zeta_hat, eta_hat, levels(base_fit.params), outcome)

    def outer_draw(rng):
        z, _ = draw_zeta(zeta_hat, zeta_cov, 1, rng)
        fit = fit_turnout(TurnoutData.from_dataset(turnout_ds, z[0]), start=base_fit.params, **kw)
        return z[0], fit

    def inner_draw(state, rng):
        _, fit = state
        return rng.multivariate_normal(fit.params, fit.cov, method="eigh")

    def evaluate(state, inner):
        z, fit = state
        raw = fit.params if inner is None else inner
        return pipeline.curve(z, eta_hat, levels(raw), outcome).mean

    bv = nested_bootstrap_variance(outer_draw, evaluate, inner_draw, n_outer, n_inner, seed)
    point.variance = bv.total
    point.bootstrap = bv
    return point
