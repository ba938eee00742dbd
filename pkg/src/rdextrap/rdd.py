"""Regression discontinuity estimation at a zero cutoff.

Local polynomial fits use the triangular kernel ``k_h(s) = (1 - |s|/h)/h``
on each side of the cutoff (left ``[-h, 0)``, right ``[0, h]``).  Every
estimator here is linear in the outcome, so it is summarised by per
observation weights; the variance uses nearest-neighbour residuals and the
per-observation contributions ``weight * residual`` are kept on the result
so that covariances between estimates that share observations can be
formed by summing cross products within clusters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.covariance import ledoit_wolf_shrinkage

from .errors import InsufficientData, NonSymmetricInput, SingularDesign, WeakFirstStage
from .validation import as_1d, check_square_symmetric, same_length

IK_TRIANGULAR_CONSTANT = 3.4375


@dataclass(frozen=True)
class RddSample:
    margin: np.ndarray
    outcome: np.ndarray
    first_stage: np.ndarray | None = None
    cluster: np.ndarray | None = None

    def __post_init__(self):
        margin = as_1d(self.margin, "margin")
        outcome = as_1d(self.outcome, "outcome")
        same_length(margin, outcome)
        object.__setattr__(self, "margin", margin)
        object.__setattr__(self, "outcome", outcome)
        if self.first_stage is not None:
            fs = as_1d(self.first_stage, "first_stage")
            same_length(margin, fs)
            object.__setattr__(self, "first_stage", fs)
        cl = np.arange(len(margin)) if self.cluster is None else np.asarray(self.cluster)
        same_length(margin, cl)
        object.__setattr__(self, "cluster", cl)

    def __len__(self):
        return len(self.margin)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "RddSample":
        return cls(
            margin=frame["margin"].to_numpy(float),
            outcome=frame["outcome"].to_numpy(float),
            first_stage=frame["first_stage"].to_numpy(float) if "first_stage" in frame else None,
            cluster=frame["cluster"].to_numpy() if "cluster" in frame else None,
        )

    @classmethod
    def from_csv(cls, path) -> "RddSample":
        return cls.from_frame(pd.read_csv(path, comment="#"))

    def with_outcome(self, outcome) -> "RddSample":
        return RddSample(self.margin, outcome, self.first_stage, self.cluster)


@dataclass(frozen=True)
class RddEstimate:
    estimate: float
    estimate_bc: float
    se: float
    bandwidth: float
    n_left: int
    n_right: int
    label: str = ""
    contributions: np.ndarray | None = field(default=None, repr=False, compare=False)
    cluster: np.ndarray | None = field(default=None, repr=False, compare=False)

    def as_row(self) -> dict:
        return {"label": self.label, "estimate": self.estimate, "estimate_bc": self.estimate_bc,
                "se": self.se, "bandwidth": self.bandwidth, "n_left": self.n_left,
                "n_right": self.n_right}


# ---------------------------------------------------------------------------
# local polynomial building blocks


def triangular_kernel(margin, h):
    u = np.abs(np.asarray(margin, float)) / h
    return np.where(u < 1.0, (1.0 - u) / h, 0.0)


def _side(margin, side):
    if side == "left":
        return margin < 0
    if side == "right":
        return margin >= 0
    raise ValueError("side must be 'left' or 'right'")


def _design(s, degree):
    return np.vander(s, degree + 1, increasing=True)


def _wls_operator(margin, side, h, degree):
    """Rows of ``(X'WX)^{-1} X'W`` over the full sample (zeros off-window)."""
    mask = _side(margin, side) & (np.abs(margin) < h)
    idx = np.flatnonzero(mask)
    if idx.size < degree + 2:
        raise InsufficientData(f"{idx.size} observations with positive weight on the {side} side")
    s = margin[idx]
    X = _design(s, degree)
    w = triangular_kernel(s, h)
    XtW = X.T * w
    gram = XtW @ X
    try:
        cond = np.linalg.cond(gram)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularDesign(f"local design on the {side} side is singular (cond={cond:.2e})")
    op = np.zeros((degree + 1, margin.size))
    op[:, idx] = np.linalg.solve(gram, XtW)
    return op


def local_linear_fit(margin, outcome, side: str, h: float, degree: int = 1) -> np.ndarray:
    """Weighted least squares coefficients ``(intercept, slope[, curvature])`` on one side."""
    margin = as_1d(margin, "margin")
    outcome = as_1d(outcome, "outcome")
    same_length(margin, outcome)
    if degree not in (1, 2):
        raise ValueError("degree must be 1 or 2")
    return _wls_operator(margin, side, h, degree) @ outcome


# ---------------------------------------------------------------------------
# bandwidth


def ik_bandwidth(margin, outcome, h_max: float | None = None, min_obs: int = 50,
                 min_window: int = 10) -> float:
    """Imbens-Kalyanaraman plug-in bandwidth for the triangular kernel.

    ``h_max`` caps the bandwidth (default: the largest ``|margin|``); it is
    hit whenever the estimated curvature terms vanish.  The bandwidth is also
    widened, if needed, so each side keeps ``min_window`` observations.
    """
    x = as_1d(margin, "margin")
    y = as_1d(outcome, "outcome")
    same_length(x, y)
    left, right = x < 0, x >= 0
    n_l, n_r = int(left.sum()), int(right.sum())
    if min(n_l, n_r) < min_obs:
        raise InsufficientData(f"need {min_obs} observations per side, have {n_l} and {n_r}")
    n = x.size
    h_max = float(np.max(np.abs(x))) if h_max is None else float(h_max)

    # step 1: density and conditional variances with a uniform pilot window
    h1 = 1.84 * np.std(x, ddof=1) * n ** (-0.2)
    wl, wr = left & (x >= -h1), right & (x <= h1)
    f0 = (wl.sum() + wr.sum()) / (2.0 * n * h1)
    var_l = np.var(y[wl], ddof=1) if wl.sum() > 1 else 0.0
    var_r = np.var(y[wr], ddof=1) if wr.sum() > 1 else 0.0

    # step 2: third derivative from a global cubic with a jump
    med_l, med_r = np.median(x[left]), np.median(x[right])
    g = (x >= med_l) & (x <= med_r)
    X = np.column_stack([np.ones(g.sum()), x[g] >= 0, x[g], x[g] ** 2, x[g] ** 3])
    coef = np.linalg.lstsq(X, y[g], rcond=None)[0]
    m3 = 6.0 * coef[4]

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        h2_l = 3.56 * (var_l / (f0 * m3**2)) ** (1 / 7) * n_l ** (-1 / 7)
        h2_r = 3.56 * (var_r / (f0 * m3**2)) ** (1 / 7) * n_r ** (-1 / 7)

    def curvature(side_mask, h2, sign):
        if not np.isfinite(h2) or h2 <= 0:
            sel = side_mask
        else:
            sel = side_mask & (sign * x <= h2)
        if sel.sum() < 4:
            sel = side_mask
        s = x[sel]
        c = np.linalg.lstsq(_design(s, 2), y[sel], rcond=None)[0]
        return 2.0 * c[2], int(sel.sum()), (h2 if np.isfinite(h2) and h2 > 0 else np.max(np.abs(s)))

    m2_l, n2_l, h2_l = curvature(left, h2_l, -1)
    m2_r, n2_r, h2_r = curvature(right, h2_r, 1)

    # step 3: regularisation and the plug-in formula
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        r_l = 2160.0 * var_l / (n2_l * h2_l**4)
        r_r = 2160.0 * var_r / (n2_r * h2_r**4)
        h = IK_TRIANGULAR_CONSTANT * ((var_l + var_r) / (f0 * ((m2_r - m2_l) ** 2 + r_l + r_r))) ** 0.2 \
            * n ** (-0.2)
    if not np.isfinite(h) or h > h_max:
        h = h_max
    # keep a minimal number of observations in each one-sided window
    floor = max(np.sort(np.abs(x[left]))[min(min_window, n_l) - 1],
                np.sort(np.abs(x[right]))[min(min_window, n_r) - 1])
    floor = float(np.nextafter(floor, np.inf))
    return float(min(max(h, floor), max(h_max, floor)))


# ---------------------------------------------------------------------------
# nearest-neighbour residuals


def nearest_neighbors(margin, n_neighbors: int = 3) -> np.ndarray:
    """Indices of the ``n_neighbors`` closest observations on the same side.

    Ties in distance are broken by record order.  Sides with too few
    observations borrow from whatever is available (fewer neighbours are
    marked with ``-1``).
    """
    x = as_1d(margin, "margin")
    n = x.size
    out = np.full((n, n_neighbors), -1, dtype=np.int64)
    for mask in (x < 0, x >= 0):
        idx = np.flatnonzero(mask)
        m = idx.size
        if m < 2:
            continue
        order = idx[np.argsort(x[idx], kind="stable")]
        xs = x[order]
        offsets = np.concatenate([np.arange(-n_neighbors, 0), np.arange(1, n_neighbors + 1)])
        pos = np.arange(m)[:, None] + offsets[None, :]
        valid = (pos >= 0) & (pos < m)
        posc = np.clip(pos, 0, m - 1)
        dist = np.where(valid, np.abs(xs[posc] - xs[:, None]), np.inf)
        # order candidates by distance, then by record order
        rec = np.where(valid, order[posc], np.iinfo(np.int64).max)
        pick = np.lexsort((rec, dist), axis=-1)[:, : min(n_neighbors, m - 1)]
        chosen = np.take_along_axis(rec, pick, axis=1)
        out[order, : chosen.shape[1]] = chosen
    return out


def nn_residuals(outcome, neighbors: np.ndarray) -> np.ndarray:
    """``sqrt(J/(J+1)) (Y_i - mean of neighbours' Y)`` for 1-d or 2-d outcomes."""
    Y = np.asarray(outcome, float)
    valid = neighbors >= 0
    J = valid.sum(axis=1)
    nb = np.where(valid, neighbors, 0)
    if Y.ndim == 1:
        mean = (Y[nb] * valid).sum(axis=1) / np.maximum(J, 1)
        scale = np.sqrt(J / (J + 1.0))
        return np.where(J > 0, scale * (Y - mean), 0.0)
    mean = (Y[nb] * valid[..., None]).sum(axis=1) / np.maximum(J, 1)[:, None]
    scale = np.sqrt(J / (J + 1.0))[:, None]
    return np.where(J[:, None] > 0, scale * (Y - mean), 0.0)


# ---------------------------------------------------------------------------
# estimators


@dataclass(frozen=True)
class _Weights:
    """Linear weights of the conventional and bias-corrected intercepts."""

    right: np.ndarray
    left: np.ndarray
    right_bc: np.ndarray
    left_bc: np.ndarray
    n_left: int
    n_right: int


def _intercept_weights(margin, h, pilot_factor=1.5) -> _Weights:
    """Weights of the one-sided intercepts and of their bias-corrected versions.

    The bias of a local-linear intercept for a locally quadratic mean is
    ``c2 * op0 @ s^2``; ``c2`` comes from a local quadratic at the pilot
    bandwidth, which is linear in the outcome too.
    """
    out = {}
    for side in ("right", "left"):
        op = _wls_operator(margin, side, h, 1)
        lever = op[0] @ (margin**2)
        b = pilot_factor * h
        try:
            op2 = _wls_operator(margin, side, b, 2)
            out[side + "_bc"] = op[0] - lever * op2[2]
        except (InsufficientData, SingularDesign):
            out[side + "_bc"] = op[0]
        out[side] = op[0]
    n_l = int(((margin < 0) & (margin > -h)).sum())
    n_r = int(((margin >= 0) & (margin < h)).sum())
    return _Weights(out["right"], out["left"], out["right_bc"], out["left_bc"], n_l, n_r)


def _cluster_sums(values, cluster):
    codes, inv = np.unique(cluster, return_inverse=True)
    if codes.size == values.shape[0]:
        order = np.argsort(cluster, kind="stable")
        return values[order]
    if values.ndim == 1:
        return np.bincount(inv, weights=values, minlength=codes.size)
    return np.stack([np.bincount(inv, weights=values[:, i], minlength=codes.size)
                     for i in range(values.shape[1])], axis=1)


def _clustered_se(contrib, cluster):
    return float(np.sqrt(np.sum(_cluster_sums(contrib, cluster) ** 2)))


def one_sided_limit(margin, values, h, side="right", pilot_factor=1.5) -> float:
    """Local-linear limit of ``values`` at the cutoff from one side."""
    w = _intercept_weights(np.asarray(margin, float), h, pilot_factor)
    return float((w.right if side == "right" else w.left) @ np.asarray(values, float))


def sharp_rd(sample: RddSample, h: float | None = None, n_neighbors: int = 3,
             pilot_factor: float = 1.5, neighbors=None, label: str = "", **bw_kwargs) -> RddEstimate:
    """Jump in the conditional mean of the outcome at the cutoff."""
    S, Y = sample.margin, sample.outcome
    h = ik_bandwidth(S, Y, **bw_kwargs) if h is None else float(h)
    w = _intercept_weights(S, h, pilot_factor)
    omega = w.right - w.left
    omega_bc = w.right_bc - w.left_bc
    nb = nearest_neighbors(S, n_neighbors) if neighbors is None else neighbors
    contrib = omega * nn_residuals(Y, nb)
    return RddEstimate(
        estimate=float(omega @ Y), estimate_bc=float(omega_bc @ Y),
        se=_clustered_se(contrib, sample.cluster), bandwidth=h, n_left=w.n_left, n_right=w.n_right,
        label=label, contributions=contrib, cluster=sample.cluster)


def fuzzy_rd_known_first_stage(sample: RddSample, h: float | None = None, n_neighbors: int = 3,
                               pilot_factor: float = 1.5, floor: float = 1e-8, neighbors=None,
                               label: str = "", **bw_kwargs) -> RddEstimate:
    """Outcome jump divided by the right limit of the first stage ``D * dlogG``.

    The first stage is zero below the cutoff by construction, so its left
    limit is omitted.  The delta-method standard error combines the
    numerator and denominator contributions observation by observation.
    """
    if sample.first_stage is None:
        raise ValueError("fuzzy estimation needs first_stage values")
    S, Y, F = sample.margin, sample.outcome, sample.first_stage
    if np.any(F[S < 0] != 0):
        raise ValueError("first stage must be zero below the cutoff")
    h = ik_bandwidth(S, Y, **bw_kwargs) if h is None else float(h)
    w = _intercept_weights(S, h, pilot_factor)
    num = float((w.right - w.left) @ Y)
    num_bc = float((w.right_bc - w.left_bc) @ Y)
    den = float(w.right @ F)
    den_bc = float(w.right_bc @ F)
    if not den > floor:
        raise WeakFirstStage(f"first-stage limit {den:.3e} is below the floor {floor:.1e}")
    beta = num / den
    beta_bc = num_bc / den_bc if den_bc > floor else beta
    nb = nearest_neighbors(S, n_neighbors) if neighbors is None else neighbors
    e = nn_residuals(np.column_stack([Y, F]), nb)
    contrib = ((w.right - w.left) * e[:, 0] - beta * w.right * e[:, 1]) / den
    return RddEstimate(
        estimate=beta, estimate_bc=beta_bc, se=_clustered_se(contrib, sample.cluster), bandwidth=h,
        n_left=w.n_left, n_right=w.n_right, label=label, contributions=contrib, cluster=sample.cluster)


def pairwise_covariance(a: RddEstimate, b: RddEstimate) -> float:
    """Cluster-robust covariance of two estimates fitted on the same observations.

    Equivalent to the off-diagonal block of the stacked, fully interacted
    local-linear system: each equation keeps its own bandwidth and weights
    and the sandwich sums cross products of the two equations' scores within
    each cluster.
    """
    if a.contributions is None or b.contributions is None:
        raise ValueError("estimates carry no per-observation contributions")
    if a.contributions.shape != b.contributions.shape or not np.array_equal(a.cluster, b.cluster):
        raise ValueError("estimates must share observations and cluster ids")
    return float(_cluster_sums(a.contributions, a.cluster) @ _cluster_sums(b.contributions, b.cluster))


def cluster_scores(estimates) -> np.ndarray:
    """Matrix of cluster-summed contributions, one column per estimate."""
    est = list(estimates)
    C = np.column_stack([e.contributions for e in est])
    return _cluster_sums(C, est[0].cluster)


def covariance_matrix(estimates) -> np.ndarray:
    """Covariance of many estimates assembled from all pairs."""
    scores = cluster_scores(estimates)
    return scores.T @ scores


def shrink_correlation(sigma, scores=None, shrinkage: float | None = None):
    """Shrink the correlation matrix behind ``sigma`` toward the identity.

    With ``scores`` (cluster-level score matrix whose cross product is
    ``sigma``) the Ledoit-Wolf optimal intensity is computed from them;
    otherwise ``shrinkage`` is used as given.  The intensity is clamped to
    [0, 1].  Returns ``(shrunk_sigma, delta)``.
    """
    m, symmetric = check_square_symmetric(sigma, "sigma")
    if not symmetric:
        raise NonSymmetricInput("covariance matrix is not symmetric")
    m = 0.5 * (m + m.T)
    sd = np.sqrt(np.clip(np.diag(m), 0.0, None))
    live = sd > 0
    if scores is not None:
        Z = np.asarray(scores, float)[:, live]
        if Z.shape[0] < 2 or Z.shape[1] < 2:
            delta = 0.0
        else:
            Z = Z / np.sqrt((Z**2).mean(axis=0))
            delta = float(ledoit_wolf_shrinkage(Z, assume_centered=True))
    elif shrinkage is not None:
        delta = float(shrinkage)
    else:
        raise ValueError("provide scores or an explicit shrinkage intensity")
    delta = float(min(1.0, max(0.0, delta)))
    out = m.copy()
    if live.any():
        sub = m[np.ix_(live, live)]
        d = sd[live]
        corr = sub / np.outer(d, d)
        corr = (1.0 - delta) * corr + delta * np.eye(corr.shape[0])
        out[np.ix_(live, live)] = corr * np.outer(d, d)
    return out, delta


def residualize(outcome, covariates, margin, h):
    """Remove the covariates' linear fit estimated inside the bandwidth window."""
    y = as_1d(outcome, "outcome")
    X = np.asarray(covariates, float)
    X = X.reshape(len(y), -1)
    inside = np.abs(as_1d(margin, "margin")) < h
    D = np.column_stack([np.ones(inside.sum()), X[inside]])
    coef = np.linalg.lstsq(D, y[inside], rcond=None)[0]
    return y - X @ coef[1:]


class RegressionDiscontinuity(BaseEstimator):
    """Estimator front end for the sharp and known-first-stage fuzzy designs.

    Parameters follow the functional API; ``fit`` stores the result in
    ``result_`` and exposes ``estimate_``, ``estimate_bc_``, ``se_`` and
    ``bandwidth_``.
    """

    def __init__(self, bandwidth=None, n_neighbors=3, pilot_factor=1.5, h_max=None, min_obs=50,
                 first_stage_floor=1e-8):
        self.bandwidth = bandwidth
        self.n_neighbors = n_neighbors
        self.pilot_factor = pilot_factor
        self.h_max = h_max
        self.min_obs = min_obs
        self.first_stage_floor = first_stage_floor

    def fit(self, margin, outcome, first_stage=None, cluster=None):
        sample = RddSample(margin, outcome, first_stage, cluster)
        kw = dict(h=self.bandwidth, n_neighbors=self.n_neighbors, pilot_factor=self.pilot_factor,
                  h_max=self.h_max, min_obs=self.min_obs)
        if first_stage is None:
            self.result_ = sharp_rd(sample, **kw)
        else:
            self.result_ = fuzzy_rd_known_first_stage(sample, floor=self.first_stage_floor, **kw)
        self.estimate_ = self.result_.estimate
        self.estimate_bc_ = self.result_.estimate_bc
        self.se_ = self.result_.se
        self.bandwidth_ = self.result_.bandwidth
        return self
