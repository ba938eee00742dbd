"""Maximum likelihood for the turnout model with redraws of the preference estimates.

Expected turnout of type ``k`` in referendum ``j`` is
``Phi((log|dv| - mu0_k - mu1_k dlogG_j) / sigma0)``, observed voters are
binomial given the population, and the benefit ``|dv|`` is computed from the
preference estimates, which enter the likelihood as constants.  Their
sampling noise is added back with a Rubin-type combination over parametric
redraws.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import ndtr, ndtri
from sklearn.base import BaseEstimator

from .dgp import ReferendumDataset
from .errors import InsufficientData, InsufficientDraws, NoConvergence, NonInvertibleHessian
from .model import myopic_vote_deltas

EPS = 1e-12
_SQRT2PI = np.sqrt(2 * np.pi)


@dataclass
class TurnoutData:
    """Per referendum and type: voters, population, benefit and the proposed change."""

    voters: np.ndarray       # (R, K) counts
    population: np.ndarray   # (R, K) counts
    benefit: np.ndarray      # (R, K), >= 0
    dlogG: np.ndarray        # (R,)

    def __post_init__(self):
        self.voters = np.atleast_2d(np.asarray(self.voters, dtype=float))
        self.population = np.atleast_2d(np.asarray(self.population, dtype=float))
        self.benefit = np.atleast_2d(np.asarray(self.benefit, dtype=float))
        self.dlogG = np.atleast_1d(np.asarray(self.dlogG, dtype=float))
        shape = self.voters.shape
        if self.population.shape != shape or self.benefit.shape != shape:
            raise ValueError("voters, population and benefit must share a shape")
        if self.dlogG.shape != (shape[0],):
            raise ValueError("dlogG must have one entry per referendum")
        if np.any(self.voters < 0) or np.any(self.voters > self.population):
            raise ValueError("voters must lie between 0 and the population")
        if np.any(~(self.benefit >= 0)):
            raise ValueError("benefits must be nonnegative")

    @property
    def n_types(self):
        return self.voters.shape[1]

    def __len__(self):
        return self.voters.shape[0]

    @classmethod
    def from_dataset(cls, ds: ReferendumDataset, zeta) -> "TurnoutData":
        return cls(ds.voters, ds.population, compute_benefits(ds, zeta), ds.dlogG)


def compute_benefits(ds: ReferendumDataset, zeta) -> np.ndarray:
    """``|dv|`` per referendum and type under ``zeta = (a_1, g_1, ..., a_K, g_K)``.

    Uses the pre-vote rent and tax of the referendum district with the logit
    scale normalised to one.
    """
    zeta = np.asarray(zeta, dtype=float).reshape(-1, 2)
    rows = np.arange(len(ds))
    P = np.asarray(ds.pre.P)[rows, ds.district]
    tau = np.asarray(ds.pre.tau)[rows, ds.district]
    dv = myopic_vote_deltas(zeta[:, 0], zeta[:, 1], ds.y, P, tau, ds.dlogG)
    return np.nan_to_num(np.abs(dv), posinf=np.finfo(float).max)


# ---------------------------------------------------------------------------
# likelihood


def n_slopes(K, common_slope=False):
    return 1 if common_slope else K


def unpack(params, K, common_sigma=True, common_slope=False):
    """``(mu0, mu1, sigma0)`` per type from ``(mu0, mu1, log sigma0)`` with optional sharing."""
    params = np.asarray(params, dtype=float)
    ns = n_slopes(K, common_slope)
    mu0 = params[:K]
    mu1 = np.broadcast_to(params[K:K + ns], (K,))
    log_s = params[K + ns:]
    sigma0 = np.full(K, np.exp(log_s[0])) if common_sigma else np.exp(log_s)
    return mu0, mu1, sigma0


def n_params(K, common_sigma=True, common_slope=False):
    return K + n_slopes(K, common_slope) + (1 if common_sigma else K)


def _z(params, data, common_sigma, common_slope=False):
    mu0, mu1, sigma0 = unpack(params, data.n_types, common_sigma, common_slope)
    with np.errstate(divide="ignore"):
        logb = np.log(data.benefit)
    return (logb - mu0 - mu1 * data.dlogG[:, None]) / sigma0, sigma0


def turnout_log_likelihood(params, data: TurnoutData, common_sigma=True, common_slope=False) -> float:
    """Binomial log-likelihood without the combinatorial constant."""
    z, _ = _z(params, data, common_sigma, common_slope)
    T = np.clip(ndtr(z), EPS, 1 - EPS)
    V, N = data.voters, data.population
    return float(np.sum(V * np.log(T) + (N - V) * np.log1p(-T)))


def turnout_gradient(params, data: TurnoutData, common_sigma=True, common_slope=False) -> np.ndarray:
    """Analytic gradient of :func:`turnout_log_likelihood`."""
    z, sigma0 = _z(params, data, common_sigma, common_slope)
    raw = ndtr(z)
    T = np.clip(raw, EPS, 1 - EPS)
    V, N = data.voters, data.population
    inside = (raw > EPS) & (raw < 1 - EPS) & np.isfinite(z)
    with np.errstate(invalid="ignore"):
        phi = np.exp(-0.5 * z**2) / _SQRT2PI
        dz = np.where(inside, phi * (V / T - (N - V) / (1 - T)), 0.0)
    zs = np.where(inside, z, 0.0)
    g_mu0 = -(dz / sigma0).sum(axis=0)
    g_mu1 = -(dz * data.dlogG[:, None] / sigma0).sum(axis=0)
    if common_slope:
        g_mu1 = np.array([g_mu1.sum()])
    g_ls = -(dz * zs).sum(axis=0)
    g_sigma = np.array([g_ls.sum()]) if common_sigma else g_ls
    return np.concatenate([g_mu0, g_mu1, g_sigma])


def numerical_hessian(grad, x, step=1e-4):
    """Central differences of an analytic gradient, step ``step * (1 + |x_i|)``, symmetrised."""
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.empty((n, n))
    for i in range(n):
        h = step * (1 + abs(x[i]))
        e = np.zeros(n)
        e[i] = h
        H[:, i] = (grad(x + e) - grad(x - e)) / (2 * h)
    return 0.5 * (H + H.T)


def moment_start(data: TurnoutData, common_sigma=True, common_slope=False) -> np.ndarray:
    """Invert smoothed turnout rates: ``log b = sigma Phi^-1(rate) + mu0 + mu1 dlogG``."""
    K = data.n_types
    ns = n_slopes(K, common_slope)
    rate = (data.voters + 0.5) / (data.population + 1.0)
    ok = data.benefit > 0
    q = ndtri(rate)
    with np.errstate(divide="ignore"):
        logb = np.log(data.benefit)
    rows, cols, ys = [], [], []
    for k in range(K):
        m = ok[:, k]
        if m.sum() < 3:
            raise InsufficientData(f"type {k} has too few cells with a positive benefit")
        Xk = np.zeros((m.sum(), n_params(K, common_sigma, common_slope)))
        Xk[:, k] = 1.0
        Xk[:, K + (0 if common_slope else k)] = data.dlogG[m]
        Xk[:, K + ns + (0 if common_sigma else k)] = q[m, k]
        rows.append(Xk)
        ys.append(logb[m, k])
    X = np.vstack(rows)
    beta, *_ = np.linalg.lstsq(X, np.concatenate(ys), rcond=None)
    sig = np.abs(beta[K + ns:])
    beta[K + ns:] = np.log(np.where(sig > 1e-3, sig, 1.0))
    return beta


@dataclass
class TurnoutFit:
    params: np.ndarray       # (mu0, mu1, log sigma0)
    cov: np.ndarray          # covariance of params
    loglik: float
    grad_norm: float         # max |gradient| of the log-likelihood
    iterations: int
    common_sigma: bool = True
    common_slope: bool = False
    n_types: int = 0

    def natural(self):
        """Parameters and covariance with sigma0 in levels."""
        return to_levels(self.params, self.cov, self.n_types, self.common_slope)


def to_levels(params, cov, K, common_slope=False):
    """Delta-method transform of the trailing log dispersions to levels."""
    p = np.asarray(params, float).copy()
    start = K + n_slopes(K, common_slope)
    Jd = np.ones(p.size)
    p[start:] = np.exp(p[start:])
    Jd[start:] = p[start:]
    return p, cov * np.outer(Jd, Jd)


def fit_turnout(data: TurnoutData, common_sigma=True, start=None, gtol=1e-6,
                max_iterations=500, common_slope=False) -> TurnoutFit:
    """Maximise the turnout likelihood and invert the curvature at the optimum."""
    if not np.any((data.voters > 0) & (data.voters < data.population)):
        raise InsufficientData("turnout is degenerate in every cell")
    scale = float(data.population.sum())
    x0 = moment_start(data, common_sigma, common_slope) if start is None else np.asarray(start, float)
    f = lambda x: -turnout_log_likelihood(x, data, common_sigma, common_slope) / scale
    g = lambda x: -turnout_gradient(x, data, common_sigma, common_slope) / scale
    res = optimize.minimize(f, x0, jac=g, method="BFGS",
                            options={"gtol": gtol * 1e-2, "maxiter": max_iterations})
    x = res.x
    its = int(res.nit)
    raw = lambda v: float(np.max(np.abs(turnout_gradient(v, data, common_sigma, common_slope))))
    # Newton polish on the finite-difference Hessian until the unscaled gradient is tiny
    for _ in range(30):
        grad = g(x)
        if raw(x) < gtol * 1e-2:
            break
        H = numerical_hessian(g, x)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-6 and f(x - t * step) > f(x) + 1e-16:
            t *= 0.5
        if t <= 1e-6:
            break
        x = x - t * step
        its += 1
    grad_norm = raw(x)
    # very large samples can hit the rounding floor of the summed gradient
    if not (grad_norm < gtol or grad_norm / scale < gtol * 1e-4):
        raise NoConvergence(its, grad_norm)
    neg_hess = -numerical_hessian(lambda v: turnout_gradient(v, data, common_sigma, common_slope), x)
    try:
        cov = np.linalg.inv(neg_hess)
    except np.linalg.LinAlgError as exc:
        raise NonInvertibleHessian("information matrix is singular") from exc
    if not np.all(np.isfinite(cov)) or np.any(np.diag(cov) <= 0):
        raise NonInvertibleHessian("information matrix is not positive definite")
    return TurnoutFit(params=x, cov=0.5 * (cov + cov.T),
                      loglik=turnout_log_likelihood(x, data, common_sigma, common_slope),
                      grad_norm=grad_norm, iterations=its, common_sigma=common_sigma,
                      common_slope=common_slope, n_types=data.n_types)


# ---------------------------------------------------------------------------
# redraws of the preference estimates


@dataclass
class TurnoutEstimate:
    params: np.ndarray       # levels: (mu0, mu1, sigma0)
    within: np.ndarray
    between: np.ndarray
    total: np.ndarray
    n_draws: int
    n_rejected: int = 0
    draws: np.ndarray | None = None
    fits: list = field(default_factory=list)

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.total), 0, None))


def rubin_combine(params, covs) -> TurnoutEstimate:
    """``total = mean(cov) + (1 + 1/m) * cov(params)`` over ``m >= 2`` draws."""
    P = np.asarray(params, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    C = np.asarray(covs, dtype=float)
    if C.ndim == 1:
        C = C[:, None, None]
    m = P.shape[0]
    if m < 2:
        raise InsufficientDraws("need at least two draws")
    within = C.mean(axis=0)
    between = np.atleast_2d(np.cov(P, rowvar=False, ddof=1))
    total = within + (1 + 1 / m) * between
    return TurnoutEstimate(params=P.mean(axis=0), within=within, between=between, total=total,
                           n_draws=m, draws=P)


def draw_zeta(zeta_hat, cov, n, rng, max_tries=100):
    """Normal draws around ``zeta_hat``, redrawing any with a nonpositive entry.

    Returns ``(draws, n_rejected)``.
    """
    zeta_hat = np.asarray(zeta_hat, float)
    rng = np.random.default_rng(rng)
    out, rejected = [], 0
    for _ in range(max_tries):
        cand = rng.multivariate_normal(zeta_hat, cov, size=n, method="eigh")
        good = np.all(cand > 0, axis=1)
        rejected += int((~good).sum())
        out.extend(cand[good])
        if len(out) >= n:
            return np.array(out[:n]), rejected
    raise InsufficientDraws(f"only {len(out)} admissible draws in {max_tries} rounds")


class TurnoutMLE(BaseEstimator):
    """Turnout parameters with variance that accounts for noise in the preference estimates.

    Parameters
    ----------
    n_draws : outer redraws of the preference estimates; 0 keeps only the
        curvature-based covariance.
    common_sigma : one cost dispersion for all types.
    common_slope : one cost slope in the proposed change for all types.
    """

    def __init__(self, n_draws=0, common_sigma=True, common_slope=False, random_state=0):
        self.n_draws = n_draws
        self.common_sigma = common_sigma
        self.common_slope = common_slope
        self.random_state = random_state

    def fit(self, ds: ReferendumDataset, zeta_hat, zeta_cov=None):
        kw = dict(common_sigma=self.common_sigma, common_slope=self.common_slope)
        base = fit_turnout(TurnoutData.from_dataset(ds, zeta_hat), **kw)
        K = ds.n_types
        ns = n_slopes(K, self.common_slope)
        levels, cov = base.natural()
        self.fit_ = base
        self.params_ = levels
        if self.n_draws and zeta_cov is not None:
            draws, rej = draw_zeta(zeta_hat, zeta_cov, self.n_draws, self.random_state)
            fits = [fit_turnout(TurnoutData.from_dataset(ds, z), start=base.params, **kw)
                    for z in draws]
            nat = [f.natural() for f in fits]
            est = rubin_combine([p for p, _ in nat], [c for _, c in nat])
            est.params = levels
            est.n_rejected = rej
            est.fits = fits
            est.draws = draws
        else:
            est = TurnoutEstimate(params=levels, within=cov, between=np.zeros_like(cov), total=cov,
                                  n_draws=1)
            est.fits = [base]
        self.estimate_ = est
        self.mu0_ = levels[:K]
        self.mu1_ = levels[K:K + ns]
        self.sigma0_ = levels[K + ns:]
        return self
