"""Spatial equilibrium solver.

The fixed point is computed on the population matrix ``N[k, j]``: given
populations, market clearing pins rents, the budget pins taxes, utilities
follow, and logit sorting returns new populations.  The update is damped,
``N <- (1 - d) N + d N'``.  Many economies that share primitives but differ
in spending can be solved at once by passing a 2-d spending array.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleIncome, NoConvergence
from .model import Economy, EquilibriumState, logit_shares, utility_matrix


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-10
    max_iterations: int = 10_000
    damping: float = 0.5
    min_damping: float = 1e-3

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True)
class CounterfactualPair:
    state0: EquilibriumState
    state1: EquilibriumState
    j: int
    dlogG: float


def _prices(economy, N):
    with np.errstate(divide="ignore"):
        logN = np.log(N)
    P = np.exp((logN - economy.lam - economy.B) / economy.eta)
    return P, N


def _logit_map(economy: Economy, Nk, G):
    """One pass of the block map.  Returns ``(Nk_new, P, tau)``."""
    N = Nk.sum(axis=-2)
    P, H = _prices(economy, N)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        tau = G / (P * H)
        v = utility_matrix(economy.alpha, economy.gamma, economy.y, economy.A_bar, G, N, P, tau,
                           economy.chi)
    inside, _ = logit_shares(np.nan_to_num(v, nan=-np.inf), economy.theta)
    return economy.sigma[:, None] * inside, P, tau


def solve_batch(economy: Economy, G=None, config: SolverConfig | None = None, warm_start=None):
    """Solve many equilibria that differ only in spending.

    Parameters
    ----------
    G : array of shape ``(R, J)`` or ``(J,)``; defaults to the economy's spending.
    warm_start : population array broadcastable to ``(R, K, J)`` or an
        :class:`EquilibriumState`.

    Returns
    -------
    state : EquilibriumState with a leading batch dimension (none if ``G`` is 1-d).
    converged : boolean array of shape ``(R,)``.
    """
    config = config or SolverConfig()
    G = economy.G if G is None else np.asarray(G, dtype=float)
    single = G.ndim == 1
    G = np.atleast_2d(G)
    R, J = G.shape
    K = economy.n_types
    if J != economy.n_jurisdictions:
        raise ValueError(f"spending has {J} districts, economy has {economy.n_jurisdictions}")
    if np.any(~(G > 0)):
        raise ValueError("spending must be positive")
    if warm_start is None:
        Nk = np.broadcast_to(economy.sigma[:, None] / (J + 1.0), (R, K, J)).copy()
    else:
        start = warm_start.Nk if isinstance(warm_start, EquilibriumState) else warm_start
        Nk = np.broadcast_to(np.asarray(start, dtype=float), (R, K, J)).copy()

    damping = np.full(R, config.damping)
    last = np.full(R, np.inf)
    iterations = np.zeros(R, dtype=int)
    residual = np.full(R, np.inf)
    P = np.empty((R, J))
    tau = np.empty((R, J))
    done = np.zeros(R, dtype=bool)
    failed = np.zeros(R, dtype=bool)
    active = np.arange(R)

    for it in range(1, config.max_iterations + 1):
        new, P_a, tau_a = _logit_map(economy, Nk[active], G[active])
        r = np.abs(new - Nk[active]).max(axis=(1, 2))
        bad = ~np.isfinite(r) | (Nk[active].sum(axis=1).min(axis=1) <= 1e-300)
        residual[active] = r
        iterations[active] = it
        P[active] = P_a
        tau[active] = tau_a
        conv = (r < config.tolerance) & ~bad
        done[active[conv]] = True
        failed[active[bad]] = True
        # back off the damping for members whose residual went up
        grew = r > last[active]
        damping[active[grew]] = np.maximum(damping[active[grew]] * 0.5, config.min_damping)
        last[active] = r
        step = ~(conv | bad)
        idx = active[step]
        d = damping[idx][:, None, None]
        Nk[idx] = (1.0 - d) * Nk[idx] + d * new[step]
        active = idx
        if active.size == 0:
            break

    H = Nk.sum(axis=1)
    state = EquilibriumState(Nk=Nk, P=P, tau=tau, H=H, G=G.copy(), residual=residual,
                             iterations=iterations, meta={"failed": failed})
    if single:
        state = state[0]
        return state, bool(done[0])
    return state, done


def solve_equilibrium(economy: Economy, G=None, config: SolverConfig | None = None,
                      warm_start=None) -> EquilibriumState:
    """Solve one equilibrium; raise on failure."""
    config = config or SolverConfig()
    state, ok = solve_batch(economy, G, config, warm_start)
    if not ok:
        if np.asarray(state.meta["failed"]).ravel()[0]:
            raise InfeasibleIncome("no fixed point keeps every occupied district feasible")
        raise NoConvergence(int(state.iterations), float(state.residual))
    return state


def counterfactual_pair(economy: Economy, j: int, dlogG: float, config: SolverConfig | None = None,
                        G=None, baseline: EquilibriumState | None = None) -> CounterfactualPair:
    """Baseline equilibrium and the equilibrium with district ``j`` spending scaled by ``e^dlogG``."""
    if not dlogG > 0:
        raise ValueError("dlogG must be positive")
    G0 = economy.G if G is None else np.asarray(G, dtype=float)
    state0 = baseline if baseline is not None else solve_equilibrium(economy, G0, config)
    G1 = np.array(state0.G, dtype=float)
    G1[j] *= np.exp(dlogG)
    state1 = solve_equilibrium(economy, G1, config, warm_start=state0)
    return CounterfactualPair(state0, state1, int(j), float(dlogG))


def equilibrium_residuals(economy: Economy, state: EquilibriumState) -> dict:
    """Max absolute residual of each equilibrium condition."""
    new, _, _ = _logit_map(economy, state.Nk, state.G)
    N = state.N
    logP = (np.log(N) - economy.lam - economy.B) / economy.eta
    return {
        "sorting": float(np.max(np.abs(new - state.Nk))),
        "clearing": float(np.max(np.abs(np.log(state.H) - np.log(N)))),
        "rent": float(np.max(np.abs(np.log(state.P) - logP))),
        "budget": float(np.max(np.abs(state.G - state.tau * state.P * state.H))),
    }
