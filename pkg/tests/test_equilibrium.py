import numpy as np
import pytest

from rdextrap.dgp import TRUE_TYPES
from rdextrap.equilibrium import (
    SolverConfig,
    counterfactual_pair,
    equilibrium_residuals,
    solve_batch,
    solve_equilibrium,
)
from rdextrap.errors import NoConvergence
from rdextrap.model import Economy, HouseholdType


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(tolerance=0.0)
    with pytest.raises(ValueError):
        SolverConfig(damping=1.5)


def test_residuals_below_tolerance(economy, state):
    res = equilibrium_residuals(economy, state)
    assert max(res.values()) < 1e-10
    assert state.residual < 1e-10


def test_conservation_and_feasibility(economy, state):
    outside = economy.sigma - state.Nk.sum(axis=1)
    assert np.all(outside > 0)
    gross = state.P * (1 + state.tau)
    assert np.all(economy.y[:, None] - gross[None, :] > 0)
    assert np.allclose(state.N, state.Nk.sum(axis=0), atol=1e-15)


def test_symmetric_economy_gives_symmetric_state():
    J = 4
    econ = Economy.from_arrays(np.zeros(J), np.full(J, -1.2), np.full(J, 0.0125), TRUE_TYPES)
    st = solve_equilibrium(econ)
    assert np.ptp(st.P) < 1e-12
    assert np.ptp(st.tau) < 1e-12
    assert np.all(np.ptp(st.Nk, axis=1) < 1e-12)


def test_warm_start_idempotent(economy, state):
    again = solve_equilibrium(economy, warm_start=state)
    assert again.iterations <= 2
    assert np.allclose(again.Nk, state.Nk, atol=1e-10)


def test_deterministic(economy):
    a = solve_equilibrium(economy)
    b = solve_equilibrium(economy)
    assert np.array_equal(a.Nk, b.Nk) and np.array_equal(a.P, b.P)


def test_batch_matches_single(economy, rng):
    G = economy.G * np.exp(rng.normal(0, 0.05, (5, economy.n_jurisdictions)))
    batch, ok = solve_batch(economy, G)
    assert ok.all()
    for r in range(5):
        single = solve_equilibrium(economy, G[r])
        assert np.allclose(batch.Nk[r], single.Nk, atol=1e-9)


def test_nonconvergence_is_reported(economy):
    with pytest.raises(NoConvergence):
        solve_equilibrium(economy, config=SolverConfig(max_iterations=2))


def test_counterfactual_pair_properties(economy, state):
    j = 3
    pair = counterfactual_pair(economy, j, 0.1, baseline=state)
    diff = np.flatnonzero(pair.state0.G != pair.state1.G)
    assert diff.tolist() == [j]
    assert np.log(pair.state1.G[j] / pair.state0.G[j]) == pytest.approx(0.1, abs=1e-14)
    dlogH = np.log(pair.state1.H) - np.log(pair.state0.H)
    dlogP = np.log(pair.state1.P) - np.log(pair.state0.P)
    assert np.max(np.abs(dlogH - economy.eta * dlogP)) < 1e-10
    dN = pair.state1.N[j] - pair.state0.N[j]
    assert np.sign(dlogP[j]) == np.sign(dN)


def test_counterfactual_continuity(economy, state):
    pair = counterfactual_pair(economy, 0, 1e-12, baseline=state)
    assert np.max(np.abs(pair.state1.Nk - pair.state0.Nk)) < 1e-10
    with pytest.raises(ValueError):
        counterfactual_pair(economy, 0, 0.0)


def test_bad_spending_rejected(economy):
    with pytest.raises(ValueError):
        solve_batch(economy, np.zeros(economy.n_jurisdictions))
    with pytest.raises(ValueError):
        solve_batch(economy, np.ones(economy.n_jurisdictions + 1))
