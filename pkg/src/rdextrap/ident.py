"""Recover preference parameters and the housing supply elasticity from RDD estimands.

For a type ``k`` and any district ``m`` (the referendum district or another
one), the midpoint-linearised logit sorting equation gives

    E[dlogN^k_m] = a * (t2 - chi t3 - t6 + chi t7) + g * (-t4 - t5 + t8 + t9)

with ``a = alpha/theta`` and ``g = gamma/theta``, where every ``t`` is a
fuzzy RDD estimand of an expectation of a product of a midpoint weight and
an arc change (see :data:`TERM_LABELS`).  Districts are indexed relative to
the one holding the referendum (position 0).  Each product is formed per
referendum from the pre-vote and post-vote snapshots, which makes the
midpoint weights observable for approved measures.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .dgp import ReferendumDataset
from .errors import ArtifactError, DimensionMismatch, InsufficientData, SingularSystem, WeakDenominator, ZeroOutsideOption
from .rdd import (
    RddEstimate,
    RddSample,
    cluster_scores,
    fuzzy_rd_known_first_stage,
    ik_bandwidth,
    local_linear_fit,
    nearest_neighbors,
    pairwise_covariance,
    shrink_correlation,
)

TERM_LABELS = (
    "dlogNk_m",          # t1: population of type k in district m
    "(1-w_m)dlogG_m",    # t2
    "(1-w_m)dlogN_m",    # t3
    "rho(1-w_m)dlogP_m",  # t4
    "rho(1-w_m)dlog(1+tau_m)",  # t5
    "sum w_l dlogG_l",   # t6, over l != m
    "sum w_l dlogN_l",   # t7
    "sum rho w_l dlogP_l",  # t8
    "sum rho w_l dlog(1+tau_l)",  # t9
)
N_TERMS = len(TERM_LABELS)


# ---------------------------------------------------------------------------
# closed forms for two equations (unit congestion)


def _two_district_parts(theta):
    t = np.asarray(theta, dtype=float)
    if t.shape != (18,):
        raise DimensionMismatch(f"expected 18 estimands, got shape {t.shape}")
    psi1 = t[1] - t[2] - t[5] + t[6]
    xi1 = -t[3] - t[4] + t[7] + t[8]
    psi2 = t[10] - t[11] - t[14] + t[15]
    xi2 = -t[12] - t[13] + t[16] + t[17]
    return t, psi1, xi1, psi2, xi2


def solve_two_district(theta, tol=1e-12):
    """Exact solve of the own-district and other-district equations.

    ``theta`` follows the 18-entry layout: entries 1-9 for the referendum
    district's equation, 10-18 for the other district's.
    """
    t, psi1, xi1, psi2, xi2 = _two_district_parts(theta)
    det = psi1 * xi2 - psi2 * xi1
    scale = max(abs(psi1 * xi2), abs(psi2 * xi1), 1e-300)
    if abs(det) <= tol * scale:
        raise SingularSystem("two-district system is singular")
    a = (t[0] * xi2 - t[9] * xi1) / det
    g = (psi1 * t[9] - psi2 * t[0]) / det
    return a, g


def two_district_jacobian(theta) -> np.ndarray:
    """Closed-form ``2 x 18`` Jacobian of ``(a, g)`` with respect to the estimands."""
    t, psi1, xi1, psi2, xi2 = _two_district_parts(theta)
    det = psi1 * xi2 - psi2 * xi1
    a, g = solve_two_district(t)
    t1, t10 = t[0], t[9]
    rows = [
        (xi2, -psi2),
        (-a * xi2, t10 - g * xi2),
        (a * xi2, -t10 + g * xi2),
        (t10 - a * psi2, -g * psi2),
        (t10 - a * psi2, -g * psi2),
        (a * xi2, -t10 + g * xi2),
        (-a * xi2, t10 - g * xi2),
        (-t10 + a * psi2, g * psi2),
        (-t10 + a * psi2, g * psi2),
        (-xi1, psi1),
        (a * xi1, -t1 + g * xi1),
        (-a * xi1, t1 - g * xi1),
        (-t1 + a * psi1, g * psi1),
        (-t1 + a * psi1, g * psi1),
        (-a * xi1, t1 - g * xi1),
        (a * xi1, -t1 + g * xi1),
        (t1 - a * psi1, -g * psi1),
        (t1 - a * psi1, -g * psi1),
    ]
    return np.array(rows).T / det


def ratio_gradient(a, g):
    return np.array([1.0 / g, -a / g**2])


def delta_method_se(theta, sigma_theta):
    """Standard errors of ``(a, g, a/g)`` for the 18-entry two-district layout.

    Returns ``(ses, cov_ag)``.
    """
    sigma = np.asarray(sigma_theta, dtype=float)
    if sigma.shape != (18, 18):
        raise DimensionMismatch(f"expected an 18 x 18 covariance, got {sigma.shape}")
    a, g = solve_two_district(theta)
    Jm = two_district_jacobian(theta)
    cov = Jm @ sigma @ Jm.T
    grad = ratio_gradient(a, g)
    var_ratio = grad @ cov @ grad
    ses = np.sqrt(np.clip([cov[0, 0], cov[1, 1], var_ratio], 0.0, None))
    return ses, cov


# ---------------------------------------------------------------------------
# general (possibly overidentified) system


def equation_coefficients(theta_eq, chi=1.0):
    """``(lhs, psi, xi)`` of each equation from an ``(M, 9)`` term array."""
    t = np.asarray(theta_eq, dtype=float)
    if t.ndim != 2 or t.shape[1] != N_TERMS:
        raise DimensionMismatch(f"expected an (M, {N_TERMS}) array, got {t.shape}")
    lhs = t[:, 0]
    psi = t[:, 1] - chi * t[:, 2] - t[:, 5] + chi * t[:, 6]
    xi = -t[:, 3] - t[:, 4] + t[:, 7] + t[:, 8]
    return lhs, psi, xi


def solve_preferences(theta_eq, chi=1.0, tol=1e-12):
    """Least-squares ``(a, g)`` with the residual norm; exact when there are two equations."""
    lhs, psi, xi = equation_coefficients(theta_eq, chi)
    if lhs.size < 2:
        raise SingularSystem("need at least two equations")
    X = np.column_stack([psi, xi])
    gram = X.T @ X
    det = np.linalg.det(gram)
    if not abs(det) > tol * max(np.trace(gram) ** 2, 1e-300):
        raise SingularSystem("preference system is rank deficient")
    beta = np.linalg.solve(gram, X.T @ lhs)
    resid = lhs - X @ beta
    return float(beta[0]), float(beta[1]), float(np.linalg.norm(resid))


def preference_jacobian(theta_eq, chi=1.0) -> np.ndarray:
    """Analytic ``2 x 9M`` Jacobian of the least-squares solution (row-major terms)."""
    lhs, psi, xi = equation_coefficients(theta_eq, chi)
    X = np.column_stack([psi, xi])
    Ginv = np.linalg.inv(X.T @ X)
    beta = Ginv @ X.T @ lhs
    e = lhs - X @ beta
    M = lhs.size
    out = np.zeros((2, M, N_TERMS))
    for m in range(M):
        d_lhs = Ginv @ X[m]
        d_psi = Ginv @ (np.array([e[m], 0.0]) - X[m] * beta[0])
        d_xi = Ginv @ (np.array([0.0, e[m]]) - X[m] * beta[1])
        out[:, m, 0] = d_lhs
        out[:, m, 1] = d_psi
        out[:, m, 2] = -chi * d_psi
        out[:, m, 5] = -d_psi
        out[:, m, 6] = chi * d_psi
        out[:, m, 3] = -d_xi
        out[:, m, 4] = -d_xi
        out[:, m, 7] = d_xi
        out[:, m, 8] = d_xi
    return out.reshape(2, M * N_TERMS)


def solve_eta(theta_H: RddEstimate, theta_P: RddEstimate, floor=1e-10, covariance=None):
    """Housing supply elasticity as the ratio of two RDD estimands, with its delta-method se."""
    if not abs(theta_P.estimate) > floor:
        raise WeakDenominator("rent estimand is too close to zero")
    eta = theta_H.estimate / theta_P.estimate
    if covariance is None:
        cov = (pairwise_covariance(theta_H, theta_P)
               if theta_H.contributions is not None and theta_P.contributions is not None else 0.0)
    else:
        cov = covariance
    grad = np.array([1.0 / theta_P.estimate, -theta_H.estimate / theta_P.estimate**2])
    V = np.array([[theta_H.se**2, cov], [cov, theta_P.se**2]])
    return float(eta), float(np.sqrt(max(grad @ V @ grad, 0.0)))


# ---------------------------------------------------------------------------
# building the estimands from referendum data


def _relative(arr, district):
    """Reorder the last axis so that position 0 is the referendum district."""
    J = arr.shape[-1]
    rel = (np.asarray(district)[:, None] + np.arange(J)[None, :]) % J
    if arr.ndim == 2:
        return np.take_along_axis(arr, rel, axis=1)
    return np.take_along_axis(arr, rel[:, None, :], axis=2)


def term_outcomes(ds: ReferendumDataset, k: int, equations=None) -> np.ndarray:
    """Per-referendum product outcomes, shape ``(R, M, 9)``.

    They are zero for rejected measures because the post-vote snapshot then
    equals the pre-vote one.
    """
    post = ds.post
    pre = ds.pre
    rel = lambda a: _relative(np.asarray(a, float), ds.district)
    J = ds.n_jurisdictions
    eqs = np.arange(J) if equations is None else np.asarray(equations, dtype=int)

    dG = rel(np.log(post.G) - np.log(pre.G))
    dN = rel(np.log(post.N) - np.log(pre.N))
    dP = rel(np.log(post.P) - np.log(pre.P))
    dT = rel(np.log1p(post.tau) - np.log1p(pre.tau))
    dNk = rel(np.log(post.Nk[:, k]) - np.log(pre.Nk[:, k]))
    w = rel(0.5 * (pre.Nk[:, k] + post.Nk[:, k]) / ds.sigma[k])
    gross = rel(0.5 * (pre.P * (1 + pre.tau) + post.P * (1 + post.tau)))
    rho = gross / (ds.y[k] - gross)

    sums = {name: (w * x).sum(axis=1) for name, x in (("G", dG), ("N", dN))}
    sums.update({name: (rho * w * x).sum(axis=1) for name, x in (("P", dP), ("T", dT))})
    R = len(ds)
    out = np.empty((R, eqs.size, N_TERMS))
    for i, m in enumerate(eqs):
        own = 1.0 - w[:, m]
        out[:, i, 0] = dNk[:, m]
        out[:, i, 1] = own * dG[:, m]
        out[:, i, 2] = own * dN[:, m]
        out[:, i, 3] = rho[:, m] * own * dP[:, m]
        out[:, i, 4] = rho[:, m] * own * dT[:, m]
        out[:, i, 5] = sums["G"] - w[:, m] * dG[:, m]
        out[:, i, 6] = sums["N"] - w[:, m] * dN[:, m]
        out[:, i, 7] = sums["P"] - rho[:, m] * w[:, m] * dP[:, m]
        out[:, i, 8] = sums["T"] - rho[:, m] * w[:, m] * dT[:, m]
    return out


def first_stage(ds: ReferendumDataset) -> np.ndarray:
    return np.where(ds.approved, ds.dlogG, 0.0)


@dataclass
class SystemInputs:
    """Estimands of one type's equations and their covariance."""

    k: int
    equations: np.ndarray
    theta: np.ndarray            # (M, 9)
    estimates: list              # RddEstimate per entry, row-major
    covariance: np.ndarray       # (9M, 9M), shrunk
    weights: dict = field(default_factory=dict)

    @property
    def labels(self):
        return [f"eq{m}:{lab}" for m in self.equations for lab in TERM_LABELS]


def cutoff_weights(ds: ReferendumDataset, k: int, h: float) -> dict:
    """Midpoints of the one-sided limits of observable weight levels at the cutoff."""
    post = ds.post
    S = ds.margin
    rel = lambda a: _relative(np.asarray(a, float), ds.district)
    share = rel(post.Nk[:, k] / ds.sigma[k])
    gross = rel(post.P * (1 + post.tau))
    rho = gross / (ds.y[k] - gross)
    lshare = rel(post.Nk[:, k] / post.N)
    out = {}
    for name, arr in (("N_over_sigma", share), ("rho", rho), ("L", lshare)):
        vals = []
        for j in range(arr.shape[1]):
            lo = local_linear_fit(S, arr[:, j], "left", h)[0]
            hi = local_linear_fit(S, arr[:, j], "right", h)[0]
            vals.append(0.5 * (lo + hi))
        out[name] = np.array(vals)
    return out


def common_bandwidth(margin, outcomes, min_obs=50) -> float:
    """Median of the plug-in bandwidths of the columns of ``outcomes``.

    The terms of one equation nearly cancel, so they must share a window:
    separate bandwidths give each term a different smoothing bias and the
    solve amplifies the differences.
    """
    hs = []
    for col in np.asarray(outcomes, float).T:
        if np.ptp(col) > 0:
            try:
                hs.append(ik_bandwidth(margin, col, min_obs=min_obs))
            except ArtifactError:
                continue
    if not hs:
        raise InsufficientData("no term admits a plug-in bandwidth")
    return float(np.median(hs))


def estimate_system_inputs(ds: ReferendumDataset, k: int, equations=None, n_neighbors=3,
                           pilot_factor=1.5, min_obs=50, shrink=True, neighbors=None,
                           with_weights=False, bandwidth="common") -> SystemInputs:
    """Fuzzy RDD estimates of every term in type ``k``'s equations.

    ``bandwidth`` is ``"common"`` (one window for all terms), ``"separate"``
    (a plug-in bandwidth per term) or a number.
    """
    J = ds.n_jurisdictions
    eqs = np.arange(J) if equations is None else np.asarray(equations, dtype=int)
    Y = term_outcomes(ds, k, eqs)
    F = first_stage(ds)
    nb = nearest_neighbors(ds.margin, n_neighbors) if neighbors is None else neighbors
    cluster = ds.referendum + ds.replication * (int(ds.referendum.max()) + 1)
    if bandwidth == "common":
        h = common_bandwidth(ds.margin, Y.reshape(len(ds), -1), min_obs)
    elif bandwidth == "separate":
        h = None
    else:
        h = float(bandwidth)
    ests = []
    for i, m in enumerate(eqs):
        for t in range(N_TERMS):
            sample = RddSample(ds.margin, Y[:, i, t], F, cluster)
            ests.append(fuzzy_rd_known_first_stage(
                sample, h=h, n_neighbors=n_neighbors, pilot_factor=pilot_factor, neighbors=nb,
                min_obs=min_obs, label=f"k{k}:eq{m}:{TERM_LABELS[t]}"))
    scores = cluster_scores(ests)
    cov = scores.T @ scores
    if shrink:
        cov, _ = shrink_correlation(cov, scores=scores)
    theta = np.array([e.estimate for e in ests]).reshape(eqs.size, N_TERMS)
    weights = {}
    if with_weights:
        weights = cutoff_weights(ds, k, float(np.median([e.bandwidth for e in ests])))
    return SystemInputs(k=k, equations=eqs, theta=theta, estimates=ests, covariance=cov,
                        weights=weights)


@dataclass
class StructuralEstimate:
    a: np.ndarray
    g: np.ndarray
    ratio: np.ndarray
    se_a: np.ndarray
    se_g: np.ndarray
    se_ratio: np.ndarray
    cov: np.ndarray          # (2K, 2K) ordered (a_1, g_1, a_2, g_2, ...)
    eta: float
    se_eta: float
    residual_norm: np.ndarray
    shrinkage: float
    n_obs: int

    @property
    def zeta(self) -> np.ndarray:
        """Stacked ``(a_1, g_1, ..., a_K, g_K)``."""
        return np.column_stack([self.a, self.g]).ravel()

    def table(self, truth_a=None, truth_g=None) -> list:
        rows = []
        for k in range(len(self.a)):
            for name, est, se, tr in (
                ("alpha/theta", self.a[k], self.se_a[k], None if truth_a is None else truth_a[k]),
                ("gamma/theta", self.g[k], self.se_g[k], None if truth_g is None else truth_g[k]),
                ("alpha/gamma", self.ratio[k], self.se_ratio[k],
                 None if truth_a is None else truth_a[k] / truth_g[k]),
            ):
                rows.append({"type": k + 1, "parameter": name, "truth": tr, "estimate": est, "se": se})
        rows.append({"type": 0, "parameter": "eta", "truth": None, "estimate": self.eta, "se": self.se_eta})
        return rows


class PreferenceEstimator(BaseEstimator):
    """Fit preference ratios for every type and the housing supply elasticity.

    Parameters
    ----------
    equations : relative district positions whose equations are stacked
        (``None`` means all districts).
    chi : congestion parameter used in the equations.
    shrink : apply Ledoit-Wolf shrinkage to the estimands' correlation matrix.
    bandwidth : ``"common"``, ``"separate"`` or a number; see
        :func:`estimate_system_inputs`.
    """

    def __init__(self, equations=None, chi=1.0, n_neighbors=3, pilot_factor=1.5, min_obs=50,
                 shrink=True, bandwidth="common"):
        self.equations = equations
        self.chi = chi
        self.n_neighbors = n_neighbors
        self.pilot_factor = pilot_factor
        self.min_obs = min_obs
        self.shrink = shrink
        self.bandwidth = bandwidth

    def fit(self, ds: ReferendumDataset):
        K, J = ds.n_types, ds.n_jurisdictions
        eqs = np.arange(J) if self.equations is None else np.asarray(self.equations, dtype=int)
        if J * (K + 2) < 2 * K + 1:
            raise SingularSystem("counting rule fails: too few districts for the number of types")
        nb = nearest_neighbors(ds.margin, self.n_neighbors)
        inputs = [estimate_system_inputs(ds, k, eqs, self.n_neighbors, self.pilot_factor,
                                         self.min_obs, shrink=False, neighbors=nb,
                                         bandwidth=self.bandwidth)
                  for k in range(K)]

        # housing supply elasticity from the referendum district's rent and housing
        F = first_stage(ds)
        cluster = inputs[0].estimates[0].cluster
        j = ds.district
        rows = np.arange(len(ds))
        post, pre = ds.post, ds.pre
        dH = np.log(post.H[rows, j]) - np.log(pre.H[rows, j])
        dP = np.log(post.P[rows, j]) - np.log(pre.P[rows, j])
        kw = dict(n_neighbors=self.n_neighbors, pilot_factor=self.pilot_factor, neighbors=nb,
                  min_obs=self.min_obs)
        th_P = fuzzy_rd_known_first_stage(RddSample(ds.margin, dP, F, cluster), label="dlogP_j", **kw)
        # same bandwidth for both so that the ratio is not driven by tuning
        th_H = fuzzy_rd_known_first_stage(RddSample(ds.margin, dH, F, cluster), h=th_P.bandwidth,
                                          label="dlogH_j", **kw)

        all_est = [e for inp in inputs for e in inp.estimates] + [th_H, th_P]
        scores = cluster_scores(all_est)
        cov = scores.T @ scores
        delta = 0.0
        if self.shrink:
            cov, delta = shrink_correlation(cov, scores=scores)
        n_per = eqs.size * N_TERMS
        a, g, res = np.empty(K), np.empty(K), np.empty(K)
        jac = np.zeros((2 * K, cov.shape[0]))
        for k, inp in enumerate(inputs):
            inp.covariance = cov[k * n_per:(k + 1) * n_per, k * n_per:(k + 1) * n_per]
            a[k], g[k], res[k] = solve_preferences(inp.theta, self.chi)
            jac[2 * k:2 * k + 2, k * n_per:(k + 1) * n_per] = preference_jacobian(inp.theta, self.chi)
        cov_ag = jac @ cov @ jac.T
        se_a = np.sqrt(np.clip(np.diag(cov_ag)[0::2], 0, None))
        se_g = np.sqrt(np.clip(np.diag(cov_ag)[1::2], 0, None))
        se_ratio = np.empty(K)
        for k in range(K):
            grad = ratio_gradient(a[k], g[k])
            block = cov_ag[2 * k:2 * k + 2, 2 * k:2 * k + 2]
            se_ratio[k] = np.sqrt(max(grad @ block @ grad, 0.0))
        eta, se_eta = solve_eta(th_H, th_P, covariance=cov[-2, -1])
        self.inputs_ = inputs
        self.eta_estimands_ = (th_H, th_P)
        self.estimate_ = StructuralEstimate(
            a=a, g=g, ratio=a / g, se_a=se_a, se_g=se_g, se_ratio=se_ratio, cov=cov_ag, eta=eta,
            se_eta=se_eta, residual_norm=res, shrinkage=delta, n_obs=len(ds))
        return self


# ---------------------------------------------------------------------------
# location effects


@dataclass(frozen=True)
class LocationEffects:
    A_bar: np.ndarray        # amenity in units of the logit scale, averaged over types
    A_by_type: np.ndarray    # (K, J) type-specific inversions
    B: np.ndarray            # productivity, mean zero
    lam: float


def calibrate_location_effects(Nk, a, g, P, tau, G, y, sigma, chi=1.0, eta=0.6) -> LocationEffects:
    """Invert logit shares for amenities and market clearing for productivity.

    Utilities are measured in units of the logit scale, so the recovered
    amenities are ``A_bar / theta``.  The productivity shocks are normalised
    to mean zero and the housing supply intercept absorbs their level.
    """
    Nk = np.asarray(Nk, float)
    if np.any(~(Nk > 0)):
        raise ValueError("observed populations must be positive")
    sigma = np.asarray(sigma, float)
    outside = sigma - Nk.sum(axis=1)
    if np.any(outside <= 0):
        raise ZeroOutsideOption("inside populations exhaust a type's mass")
    N = Nk.sum(axis=0)
    gross = np.asarray(P, float) * (1 + np.asarray(tau, float))
    disposable = np.asarray(y, float)[:, None] - gross[None, :]
    a = np.asarray(a, float)[:, None]
    g = np.asarray(g, float)[:, None]
    v_rest = a * (np.log(G) - chi * np.log(N)) + g * np.log(disposable)
    A_k = np.log(Nk / outside[:, None]) - v_rest
    shifted = np.log(N) - eta * np.log(P)
    lam = float(shifted.mean())
    return LocationEffects(A_bar=A_k.mean(axis=0), A_by_type=A_k, B=shifted - lam, lam=lam)


def counting_rule(n_jurisdictions: int, n_types: int) -> bool:
    return n_jurisdictions * (n_types + 2) >= 2 * n_types + 1
