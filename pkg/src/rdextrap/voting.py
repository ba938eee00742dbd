"""Turnout, approval decisions and the approval vote share margin."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .equilibrium import SolverConfig, solve_batch
from .errors import NoConvergence, ZeroTurnout
from .model import Economy, EquilibriumState, HouseholdType, myopic_vote_deltas, utility_matrix

ANTICIPATION_MODES = ("myopic", "full")


@dataclass(frozen=True)
class VoteOutcome:
    margin: float
    approved: bool
    turnout: np.ndarray
    approval: np.ndarray
    delta_v: np.ndarray


def turnout_probability(mu0, mu1, sigma0, benefit, dlogG):
    """Probability that the net benefit of voting exceeds a log-normal cost.

    ``T = Phi((log|dv| - mu0 - mu1 dlogG) / sigma0)``; a zero benefit gives 0
    and an infinite one gives 1.
    """
    benefit = np.abs(np.asarray(benefit, dtype=float))
    with np.errstate(divide="ignore"):
        z = (np.log(benefit) - mu0 - mu1 * np.asarray(dlogG, float)) / sigma0
    T = ndtr(z)
    return float(T) if not np.ndim(T) else T


def type_turnout(htype: HouseholdType, benefit, dlogG):
    return turnout_probability(htype.mu0, htype.mu1, htype.sigma0, benefit, dlogG)


def vote_share_margin(populations, turnouts, approvals):
    """``sum N T W / sum N T - 0.5`` along the last axis."""
    N = np.asarray(populations, float)
    T = np.asarray(turnouts, float)
    W = np.asarray(approvals, float)
    voters = (N * T).sum(axis=-1)
    if np.any(~(voters > 0)):
        raise ZeroTurnout("expected turnout is zero")
    S = (N * T * W).sum(axis=-1) / voters - 0.5
    S = np.clip(S, -0.5, 0.5)
    return float(S) if not np.ndim(S) else S


def margins_from_deltas(Nk_j, delta_v, dlogG, mu0, mu1, sigma0, strict=True):
    """Vectorised margins from utility gains.

    ``Nk_j`` and ``delta_v`` have shape ``(..., K)``.  Rows with no expected
    voters raise :class:`ZeroTurnout` when ``strict`` and get ``nan`` otherwise.
    Returns ``(S, T, W)``.
    """
    dlogG = np.asarray(dlogG, float)[..., None]
    T = turnout_probability(mu0, mu1, sigma0, delta_v, dlogG)
    W = (np.asarray(delta_v) >= 0).astype(float)
    voters = (Nk_j * T).sum(axis=-1)
    if strict and np.any(~(voters > 0)):
        raise ZeroTurnout("expected turnout is zero")
    with np.errstate(invalid="ignore", divide="ignore"):
        S = np.clip((Nk_j * T * W).sum(axis=-1) / voters - 0.5, -0.5, 0.5)
    return S, T, W


def full_vote_deltas(economy: Economy, state: EquilibriumState, j, dlogG,
                     config: SolverConfig | None = None):
    """Utility gains when voters anticipate the re-solved equilibrium.

    ``state`` may be batched with ``j`` and ``dlogG`` arrays over the batch.
    """
    batched = bool(state.batch_shape)
    G0 = np.atleast_2d(state.G)
    R = G0.shape[0]
    j = np.broadcast_to(np.asarray(j, dtype=int), (R,))
    d = np.broadcast_to(np.asarray(dlogG, dtype=float), (R,))
    G1 = G0.copy()
    G1[np.arange(R), j] *= np.exp(d)
    Nk0 = np.reshape(state.Nk, (R,) + state.Nk.shape[-2:])
    new, ok = solve_batch(economy, G1, config, warm_start=Nk0)
    if not np.all(ok):
        bad = np.flatnonzero(~ok)[0]
        raise NoConvergence(int(new.iterations[bad]), float(new.residual[bad]))

    def v_at(st, Nk):
        P = np.reshape(st.P, (R, -1))
        tau = np.reshape(st.tau, (R, -1))
        G = np.reshape(st.G, (R, -1))
        v = utility_matrix(economy.alpha, economy.gamma, economy.y, economy.A_bar, G, Nk.sum(axis=1),
                           P, tau, economy.chi)
        return v[np.arange(R), :, j]

    dv = v_at(new, new.Nk) - v_at(state, Nk0)
    return dv if batched else dv[0]


def vote_deltas(economy: Economy, state: EquilibriumState, j, dlogG, mode="myopic",
                config: SolverConfig | None = None):
    """Per-type utility gains ``(..., K)`` from raising log spending in ``j``."""
    if mode not in ANTICIPATION_MODES:
        raise ValueError(f"anticipation mode must be one of {ANTICIPATION_MODES}")
    if mode == "full":
        return full_vote_deltas(economy, state, j, dlogG, config)
    P = np.asarray(state.P)
    tau = np.asarray(state.tau)
    if P.ndim == 1:
        Pj, tj = P[j], tau[j]
    else:
        rows = np.arange(P.shape[0])
        Pj, tj = P[rows, j], tau[rows, j]
    return myopic_vote_deltas(economy.alpha, economy.gamma, economy.y, Pj, tj, dlogG)


def referendum_outcome(economy: Economy, state: EquilibriumState, j: int, dlogG: float,
                       mode="myopic", config: SolverConfig | None = None) -> VoteOutcome:
    """Expected vote in district ``j`` on a proposal to raise log spending by ``dlogG``."""
    if not dlogG > 0:
        raise ValueError("dlogG must be positive")
    dv = np.asarray(vote_deltas(economy, state, j, dlogG, mode, config), dtype=float)
    T = turnout_probability(economy.mu0, economy.mu1, economy.sigma0, dv, dlogG)
    W = (dv >= 0).astype(float)
    S = vote_share_margin(state.Nk[:, j], T, W)
    return VoteOutcome(margin=S, approved=bool(S > 0), turnout=np.asarray(T), approval=W, delta_v=dv)
