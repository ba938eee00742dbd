"""Closed-form primitives of the spatial sorting model.

Households of K discrete types choose among J school districts (plus an
outside option) with logit probabilities.  Housing supply is iso-elastic,
every household consumes one unit of housing, and each district balances
its budget with a property tax on housing values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import (
    NonpositiveDisposableIncome,
    NonpositiveInput,
    NonpositivePopulation,
    NonpositiveSpending,
    SingularSystem,
    Unbounded,
)


@dataclass(frozen=True)
class HouseholdType:
    """Preference, income and turnout primitives of one household type."""

    alpha: float
    gamma: float
    y: float
    sigma: float = 0.25
    theta: float = 1.0
    mu0: float = 0.0
    mu1: float = 0.0
    sigma0: float = 1.0
    beta: float | None = None

    def __post_init__(self):
        for name in ("alpha", "gamma", "sigma", "theta", "sigma0", "y"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"HouseholdType.{name} must be positive and finite, got {value}")
        if self.beta is None:
            object.__setattr__(self, "beta", 1.0 - self.alpha - self.gamma)


@dataclass(frozen=True)
class Jurisdiction:
    A_bar: float
    B: float
    G: float

    def __post_init__(self):
        if not (np.isfinite(self.A_bar) and np.isfinite(self.B)):
            raise ValueError("Jurisdiction amenity and productivity must be finite")
        if not (np.isfinite(self.G) and self.G > 0):
            raise NonpositiveSpending(f"spending must be positive, got {self.G}")


@dataclass(frozen=True)
class Economy:
    """Immutable model configuration.

    Array views of the jurisdiction and type attributes are cached so that
    vectorised code never loops over the dataclasses.
    """

    jurisdictions: tuple
    types: tuple
    eta: float = 0.6
    lam: float = 0.0
    chi: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "jurisdictions", tuple(self.jurisdictions))
        object.__setattr__(self, "types", tuple(self.types))
        if not self.jurisdictions or not self.types:
            raise ValueError("an economy needs at least one jurisdiction and one type")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.chi <= 1.0:
            raise ValueError("chi must lie in [0, 1]")

    @classmethod
    def from_arrays(cls, A_bar, B, G, types: Sequence[HouseholdType], eta=0.6, lam=0.0, chi=1.0):
        A_bar, B, G = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (A_bar, B, G)))
        juris = tuple(Jurisdiction(float(a), float(b), float(g)) for a, b, g in zip(A_bar, B, G))
        return cls(juris, tuple(types), eta=eta, lam=lam, chi=chi)

    @property
    def n_jurisdictions(self) -> int:
        return len(self.jurisdictions)

    @property
    def n_types(self) -> int:
        return len(self.types)

    @cached_property
    def A_bar(self):
        return np.array([j.A_bar for j in self.jurisdictions])

    @cached_property
    def B(self):
        return np.array([j.B for j in self.jurisdictions])

    @cached_property
    def G(self):
        return np.array([j.G for j in self.jurisdictions])

    def _type_array(self, name):
        return np.array([getattr(t, name) for t in self.types], dtype=float)

    @cached_property
    def alpha(self):
        return self._type_array("alpha")

    @cached_property
    def gamma(self):
        return self._type_array("gamma")

    @cached_property
    def y(self):
        return self._type_array("y")

    @cached_property
    def sigma(self):
        return self._type_array("sigma")

    @cached_property
    def theta(self):
        return self._type_array("theta")

    @cached_property
    def mu0(self):
        return self._type_array("mu0")

    @cached_property
    def mu1(self):
        return self._type_array("mu1")

    @cached_property
    def sigma0(self):
        return self._type_array("sigma0")

    def with_spending(self, G) -> "Economy":
        G = np.broadcast_to(np.asarray(G, dtype=float), (self.n_jurisdictions,))
        juris = tuple(replace(j, G=float(g)) for j, g in zip(self.jurisdictions, G))
        return replace(self, jurisdictions=juris)

    def with_types(self, types) -> "Economy":
        return replace(self, types=tuple(types))


@dataclass(frozen=True)
class EquilibriumState:
    """Equilibrium allocation.

    ``Nk`` has shape ``(..., K, J)`` and the district arrays ``(..., J)``; a
    leading batch dimension is allowed so that many equilibria can be stored
    in one object.  Indexing with an integer extracts one member of a batch.
    """

    Nk: np.ndarray
    P: np.ndarray
    tau: np.ndarray
    H: np.ndarray
    G: np.ndarray
    residual: np.ndarray | float = 0.0
    iterations: np.ndarray | int = 0
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def N(self):
        return self.Nk.sum(axis=-2)

    @property
    def gross_price(self):
        return self.P * (1.0 + self.tau)

    @property
    def batch_shape(self):
        return self.P.shape[:-1]

    def __getitem__(self, idx):
        if not self.batch_shape:
            raise TypeError("state is not batched")
        res = np.asarray(self.residual)
        it = np.asarray(self.iterations)
        return EquilibriumState(
            Nk=self.Nk[idx], P=self.P[idx], tau=self.tau[idx], H=self.H[idx], G=self.G[idx],
            residual=res[idx] if res.ndim else res, iterations=it[idx] if it.ndim else it,
            meta=self.meta,
        )

    def __len__(self):
        if not self.batch_shape:
            raise TypeError("state is not batched")
        return self.batch_shape[0]


# ---------------------------------------------------------------------------
# utility and choice


def systematic_utility(htype: HouseholdType, G, N, P, tau, A_bar, chi) -> float:
    """Systematic utility of one type in one district."""
    if G <= 0:
        raise NonpositiveSpending(f"spending must be positive, got {G}")
    if N <= 0:
        raise NonpositivePopulation(f"population must be positive, got {N}")
    disposable = htype.y - P * (1.0 + tau)
    if not disposable > 0:
        raise NonpositiveDisposableIncome(f"disposable income {disposable} is not positive")
    return (A_bar + htype.alpha * math.log(G) - htype.alpha * chi * math.log(N)
            + htype.gamma * math.log(disposable))


def utility_matrix(alpha, gamma, y, A_bar, G, N, P, tau, chi):
    """Vectorised systematic utilities with shape ``(..., K, J)``.

    Cells with nonpositive disposable income get ``-inf`` so that their
    choice probability is exactly zero.
    """
    alpha = np.asarray(alpha, float)[:, None]
    gamma = np.asarray(gamma, float)[:, None]
    y = np.asarray(y, float)[:, None]
    G = np.asarray(G, float)[..., None, :]
    N = np.asarray(N, float)[..., None, :]
    gross = (np.asarray(P, float) * (1.0 + np.asarray(tau, float)))[..., None, :]
    disposable = y - gross
    ok = disposable > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        v = A_bar + alpha * (np.log(G) - chi * np.log(N)) + gamma * np.log(np.where(ok, disposable, 1.0))
    return np.where(ok, v, -np.inf)


def logit_shares(v, theta=1.0):
    """Inside shares ``exp(v/theta) / (1 + sum exp(v/theta))`` along the last axis.

    Returns ``(inside, outside)``.  Uses a max shift that includes the outside
    option's zero utility.
    """
    v = np.asarray(v, dtype=float)
    if np.any(np.isnan(v)) or np.any(v == np.inf):
        raise ValueError("utilities must be finite or -inf")
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0):
        raise ValueError("theta must be positive")
    z = v / (theta[..., None] if theta.ndim else theta)
    m = np.maximum(z.max(axis=-1, keepdims=True), 0.0)
    e = np.exp(z - m)
    e0 = np.exp(-m)
    denom = e0 + e.sum(axis=-1, keepdims=True)
    return e / denom, (e0 / denom)[..., 0]


def choice_probabilities(v, theta=1.0) -> np.ndarray:
    """Choice probabilities over the J districts followed by the outside option."""
    inside, outside = logit_shares(v, theta)
    return np.concatenate([inside, np.asarray(outside)[..., None]], axis=-1)


# ---------------------------------------------------------------------------
# housing market and budget


def market_clearing_price(N_total, lam, eta, B):
    """Rent that clears the housing market, ``log P = (log N - lam - B) / eta``.

    Returns ``(P, H)`` with ``H`` equal to ``N_total``.
    """
    N_total = np.asarray(N_total, dtype=float)
    if np.any(~(N_total > 0)):
        raise NonpositivePopulation("population must be positive to clear the housing market")
    logP = (np.log(N_total) - lam - np.asarray(B, dtype=float)) / eta
    P = np.exp(logP)
    H = N_total.copy() if N_total.ndim else N_total
    if not np.ndim(P):
        return float(P), float(H)
    return P, H


def housing_supply(logP, lam, eta, B):
    """Log housing units supplied at log rent ``logP``."""
    return lam + eta * np.asarray(logP, dtype=float) + np.asarray(B, dtype=float)


def balanced_budget_tax(G, P, H):
    G, P, H = (np.asarray(a, dtype=float) for a in (G, P, H))
    if np.any(G <= 0) or np.any(P <= 0) or np.any(H <= 0):
        raise NonpositiveInput("G, P and H must all be positive")
    tau = G / (P * H)
    return float(tau) if not tau.ndim else tau


def expenditure_share(y, P, tau):
    """Gross-of-tax housing expenditure relative to disposable income."""
    gross = np.asarray(P, float) * (1.0 + np.asarray(tau, float))
    disposable = np.asarray(y, float) - gross
    if np.any(disposable <= 0):
        raise NonpositiveDisposableIncome("expenditure share undefined: disposable income <= 0")
    rho = gross / disposable
    return float(rho) if not np.ndim(rho) else rho


# ---------------------------------------------------------------------------
# government possibility frontier


@dataclass(frozen=True)
class GpfPartials:
    J_g: float
    J_p: float
    J_tau: float
    K_g: float
    K_p: float
    K_tau: float


def gpf_partials(alpha_hat, gamma_hat, N, chi, eta, tau) -> GpfPartials:
    """Partial derivatives of the housing-market (J) and budget (K) conditions."""
    denom = 1.0 + chi * alpha_hat / N
    num = gamma_hat - (chi / N) * gamma_hat * (alpha_hat - gamma_hat)
    return GpfPartials(
        J_g=-alpha_hat / denom,
        J_p=eta + num / denom,
        J_tau=num / denom,
        K_g=-1.0,
        K_p=1.0 + eta,
        K_tau=(1.0 + tau) / tau,
    )


def gpf_slopes_from_partials(d: GpfPartials, tol=1e-14):
    """Total derivatives ``(dlogP/dlogG, dlog(1+tau)/dlogG)`` along the frontier."""
    den_p = d.J_p * d.K_tau - d.J_tau * d.K_p
    den_t = d.J_tau * d.K_p - d.J_p * d.K_tau
    scale = max(abs(d.J_p * d.K_tau), abs(d.J_tau * d.K_p), 1.0)
    if abs(den_p) <= tol * scale:
        raise SingularSystem("government possibility frontier system is singular")
    dp = -(d.J_g * d.K_tau - d.J_tau * d.K_g) / den_p
    dt = -(d.J_g * d.K_p - d.J_p * d.K_g) / den_t
    return dp, dt


def mobility_sums(economy: Economy, state: EquilibriumState, j: int):
    """Discrete-type versions of the mobility terms ``alpha_hat`` and ``gamma_hat``."""
    Nk = state.Nk[:, j]
    share = Nk / economy.sigma
    curvature = Nk * (1.0 - share)
    rho = expenditure_share(economy.y, state.P[j], state.tau[j])
    alpha_hat = float(np.sum(economy.alpha / economy.theta * curvature))
    gamma_hat = float(np.sum(economy.gamma * rho / economy.theta * curvature))
    return alpha_hat, gamma_hat


def gpf_slopes(economy: Economy, state: EquilibriumState, j: int, mode: str = "myopic"):
    """Slopes of the frontier at district ``j``.

    ``myopic`` holds population fixed so only the budget responds; ``general``
    lets the local population react through the logit sorting margin.
    """
    tau = float(state.tau[j])
    if mode == "myopic":
        return 0.0, tau / (1.0 + tau)
    if mode != "general":
        raise ValueError(f"unknown mode {mode!r}")
    alpha_hat, gamma_hat = mobility_sums(economy, state, j)
    d = gpf_partials(alpha_hat, gamma_hat, float(state.N[j]), economy.chi, economy.eta, tau)
    return gpf_slopes_from_partials(d)


# ---------------------------------------------------------------------------
# preferred tax rates and voting utility


def preferred_tax_rate(htype_or_alpha, rho, gamma=None) -> float:
    """Myopic preferred tax rate ``max{alpha / (gamma rho - alpha), 0}``.

    Raises :class:`Unbounded` when ``gamma * rho <= alpha`` because the
    first-order condition then has no interior solution.
    """
    if isinstance(htype_or_alpha, HouseholdType):
        alpha, gamma = htype_or_alpha.alpha, htype_or_alpha.gamma
    else:
        alpha = float(htype_or_alpha)
    if not rho > 0:
        raise NonpositiveInput("rho must be positive")
    excess = gamma * rho - alpha
    if excess <= 0:
        raise Unbounded(f"gamma*rho={gamma * rho} does not exceed alpha={alpha}")
    return max(alpha / excess, 0.0)


def myopic_value(htype: HouseholdType, P, tau0, logG_shift):
    """Indirect utility (up to constants) along the myopic frontier.

    Spending moves by ``logG_shift`` relative to the state where the tax is
    ``tau0``; rent, housing and population are held fixed, so the tax scales
    one for one with spending.
    """
    tau = tau0 * np.exp(logG_shift)
    disposable = htype.y - P * (1.0 + tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        return htype.alpha * logG_shift + htype.gamma * np.log(disposable)


def myopic_value_curvature(htype: HouseholdType, P, tau):
    """Exact second derivative of :func:`myopic_value` in log spending.

    Along the myopic frontier ``dtau/dlogG = tau`` and the curvature is
    ``-gamma P tau (y - P) / (y - P(1+tau))**2``.
    """
    disposable = htype.y - P * (1.0 + tau)
    if np.any(disposable <= 0):
        raise NonpositiveDisposableIncome("disposable income must be positive")
    return -htype.gamma * P * tau * (htype.y - P) / disposable**2


def myopic_vote_delta(htype: HouseholdType, state: EquilibriumState, j: int, dlogG: float) -> float:
    """Utility gain of one type from raising log spending in ``j`` by ``dlogG``.

    Voters hold rent, housing and population fixed and let the tax absorb
    the new spending, ``tau' = G e^dlogG / (P H)``.
    """
    if dlogG < 0:
        raise ValueError("dlogG must be nonnegative")
    P = float(state.P[j])
    tau0 = float(state.tau[j])
    tau1 = float(state.G[j]) * math.exp(dlogG) / (P * float(state.H[j]))
    d0 = htype.y - P * (1.0 + tau0)
    d1 = htype.y - P * (1.0 + tau1)
    if d0 <= 0 or d1 <= 0:
        raise NonpositiveDisposableIncome("counterfactual gross-of-tax rent exceeds income")
    return htype.alpha * dlogG + htype.gamma * (math.log(d1) - math.log(d0))


def myopic_vote_deltas(alpha, gamma, y, P, tau, dlogG):
    """Vectorised myopic utility gains, shape ``(..., K)``.

    ``P``, ``tau`` and ``dlogG`` describe the voting district and broadcast
    against each other; a counterfactual with nonpositive disposable income
    yields ``-inf``.
    """
    P = np.asarray(P, float)[..., None]
    tau = np.asarray(tau, float)[..., None]
    d = np.asarray(dlogG, float)[..., None]
    alpha, gamma, y = (np.asarray(a, float) for a in (alpha, gamma, y))
    d0 = y - P * (1.0 + tau)
    d1 = y - P * (1.0 + tau * np.exp(d))
    ok = (d0 > 0) & (d1 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        dv = alpha * d + gamma * (np.log(np.where(ok, d1, 1.0)) - np.log(np.where(ok, d0, 1.0)))
    return np.where(ok, dv, -np.inf)
