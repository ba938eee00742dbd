import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from rdextrap.errors import ZeroTurnout
from rdextrap.equilibrium import counterfactual_pair
from rdextrap.model import expenditure_share
from rdextrap.voting import (
    margins_from_deltas,
    referendum_outcome,
    turnout_probability,
    vote_deltas,
    vote_share_margin,
)


def test_turnout_examples():
    assert turnout_probability(-3, -1, 3, 0.0, 0.1) == 0.0
    assert turnout_probability(-3, -1, 3, math.exp(-3 - 0.1), 0.1) == pytest.approx(0.5, abs=1e-14)
    # log benefit -2 against a mean log cost of -3 - 0.1: Phi(1.1 / 3)
    assert turnout_probability(-3, -1, 3, math.exp(-2), 0.1) == pytest.approx(norm.cdf(1.1 / 3), abs=1e-12)
    assert turnout_probability(-3, -1, 3, math.exp(-2), 0.1) == pytest.approx(0.6431, abs=1e-4)


def test_margin_examples():
    assert vote_share_margin([0.2, 0.3], [0.4, 0.1], [1, 1]) == 0.5
    assert vote_share_margin([0.2, 0.3], [0.4, 0.1], [0, 0]) == -0.5
    assert vote_share_margin([0.2, 0.2], [0.3, 0.3], [1, 0]) == pytest.approx(0.0, abs=1e-15)
    assert vote_share_margin([0.3, 0.1], [0.5, 0.25], [1, 0]) == pytest.approx(0.15 / 0.175 - 0.5)
    with pytest.raises(ZeroTurnout):
        vote_share_margin([0.3, 0.1], [0.0, 0.0], [1, 0])


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 1), st.floats(0.01, 1), st.booleans()), min_size=1, max_size=6),
       st.floats(0.1, 100))
def test_margin_properties(cells, scale):
    N = np.array([c[0] for c in cells])
    T = np.array([c[1] for c in cells])
    W = np.array([float(c[2]) for c in cells])
    S = vote_share_margin(N, T, W)
    assert -0.5 <= S <= 0.5
    assert vote_share_margin(N * scale, T, W) == pytest.approx(S, abs=1e-12)
    for k in range(len(W)):
        if W[k] == 0:
            W2 = W.copy()
            W2[k] = 1.0
            assert vote_share_margin(N, T, W2) >= S - 1e-15


def test_tie_conventions():
    # an indifferent type approves (W uses >=) ...
    S, T, W = margins_from_deltas(np.array([0.1, 0.1]), np.array([0.0, -0.01]), 0.1,
                                  np.array([-3.0, -3.0]), np.array([0.0, 0.0]), np.array([1.0, 1.0]),
                                  strict=False)
    assert W.tolist() == [1.0, 0.0]
    # ... but a zero benefit means no turnout; a zero margin fails (D uses >)
    assert T[0] == 0.0
    assert not (0.0 > 0)


def test_referendum_outcome_zero_benefit(economy, state):
    with pytest.raises(ValueError):
        referendum_outcome(economy, state, 0, 0.0)
    with pytest.raises(ZeroTurnout):
        vote_share_margin(state.Nk[:, 0], np.zeros(economy.n_types), np.ones(economy.n_types))


def test_referendum_outcome_consistency(economy, state):
    out = referendum_outcome(economy, state, 2, 0.1)
    assert out.approved == (out.margin > 0)
    assert -0.5 <= out.margin <= 0.5
    assert np.all((out.turnout >= 0) & (out.turnout <= 1))


def test_small_change_sign_matches_foc(economy, state):
    d = 1e-4
    for j in range(economy.n_jurisdictions):
        dv = vote_deltas(economy, state, j, d)
        tau = state.tau[j]
        for k in range(economy.n_types):
            rho = expenditure_share(economy.y[k], state.P[j], tau)
            marginal = economy.alpha[k] - economy.gamma[k] * rho * tau / (1 + tau)
            if abs(marginal) > 1e-3:
                assert np.sign(dv[k]) == np.sign(marginal)


def test_full_mode_uses_resolved_equilibrium(economy, state):
    dv_full = vote_deltas(economy, state, 1, 0.1, mode="full")
    pair = counterfactual_pair(economy, 1, 0.1, baseline=state)
    from rdextrap.model import utility_matrix

    def v(st):
        return utility_matrix(economy.alpha, economy.gamma, economy.y, economy.A_bar, st.G, st.N, st.P,
                              st.tau, economy.chi)[:, 1]

    assert np.allclose(dv_full, v(pair.state1) - v(pair.state0), atol=1e-8)
    with pytest.raises(ValueError):
        vote_deltas(economy, state, 1, 0.1, mode="psychic")


def test_expected_margin_decreasing_in_proposal(economy, state):
    grid = np.linspace(0.01, 0.4, 20)
    S = np.array([[referendum_outcome(economy, state, j, d).margin for d in grid]
                  for j in range(economy.n_jurisdictions)]).mean(axis=0)
    slope = np.polyfit(grid, S, 1)[0]
    assert slope < 0
