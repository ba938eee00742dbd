import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdextrap.errors import InsufficientDraws
from rdextrap.extrap import (AveCurve, ExtrapolationPipeline, bin_edges, bin_index, binned_ave,
                             binned_margin_by_grid, check_grid, make_grid, monotonicity_violations,
                             nested_bootstrap_variance, _turnout_levels)
from rdextrap.mle import TurnoutMLE


def _brute_force(margin, values, kappa):
    edges = bin_edges(kappa)
    sums, counts = np.zeros(edges.size), np.zeros(edges.size, int)
    for s, v in zip(margin, values):
        if not (np.isfinite(s) and np.isfinite(v)) or s < -0.5 or s > 0.5:
            continue
        i = max(i for i, e in enumerate(edges) if e <= s)
        sums[i] += v
        counts[i] += 1
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, sums / counts, np.nan), counts


def test_bin_edges_and_boundaries():
    edges = bin_edges(0.25)
    assert np.allclose(edges, [-0.5, -0.25, 0.0, 0.25])
    assert bin_index([-0.5, -0.25, 0.0, 0.4999, 0.5], edges).tolist() == [0, 1, 2, 3, 3]
    assert bin_edges(0.005).size == 200
    with pytest.raises(ValueError):
        bin_edges(-0.1)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-0.6, 0.6), min_size=1, max_size=60), st.sampled_from([0.005, 0.05, 0.1, 0.3]))
def test_binning_matches_brute_force(margin, kappa):
    values = np.arange(len(margin), dtype=float)
    curve = binned_ave(margin, values, kappa)
    mean, counts = _brute_force(margin, values, kappa)
    assert np.array_equal(curve.count, counts)
    assert np.allclose(curve.mean, mean, equal_nan=True)


def test_binning_partition_and_single_bin(rng):
    S = rng.uniform(-0.5, 0.5, 1000)
    V = rng.normal(size=1000)
    curve = binned_ave(S, V, 0.01)
    assert curve.count.sum() == 1000
    assert np.nansum(curve.mean * curve.count) == pytest.approx(V.sum())
    one = binned_ave(S, V, 1.0)
    assert one.mean.size == 1 and one.mean[0] == pytest.approx(V.mean())
    frame = curve.to_frame()
    assert list(frame.columns) == ["bin_left", "bin_center", "mean", "count"]
    assert np.allclose(frame.bin_center, curve.edges + 0.005)


def test_grid_checks():
    assert make_grid(0.01, 0.4, 20).size == 20
    for bad in ([], [0.1, 0.1], [-0.1, 0.2], [[0.1]]):
        with pytest.raises(ValueError):
            check_grid(bad)


def test_monotonicity_violations():
    assert monotonicity_violations([3, 2, 1]) == 0.0
    assert monotonicity_violations([1, 2, 1, 0]) == pytest.approx(1 / 3)
    assert monotonicity_violations([np.nan, 1.0]) == 0.0


def test_turnout_levels_layouts():
    mu0, mu1, s0 = _turnout_levels([1, 2, 3, 4, 5], 2)
    assert mu1.tolist() == [3, 4] and s0.tolist() == [5, 5]
    mu0, mu1, s0 = _turnout_levels([1, 2, 3, 4, 5], 2, common_slope=True)
    assert mu1.tolist() == [3, 3] and s0.tolist() == [4, 5]
    with pytest.raises(ValueError):
        _turnout_levels([1, 2, 3], 2)


def _sequence_draw(values):
    it = itertools.cycle(values)
    return lambda rng: next(it)


def test_nested_bootstrap_degenerate():
    bv = nested_bootstrap_variance(lambda rng: 1.0, lambda s, i: np.array([s, 2 * s]),
                                   lambda s, rng: None, 5, 3, seed=0)
    assert np.allclose(bv.within, 0.0) and np.allclose(bv.total, 0.0)


def test_nested_bootstrap_example():
    bv = nested_bootstrap_variance(_sequence_draw([0.0, 2.0]), lambda s, i: np.array([s]),
                                   lambda s, rng: None, 2, 2, seed=0)
    assert bv.between[0] == pytest.approx(2.0) and bv.within[0] == 0.0
    assert bv.total[0] == pytest.approx(3.0)
    with pytest.raises(InsufficientDraws):
        nested_bootstrap_variance(lambda rng: 0.0, lambda s, i: 0.0, lambda s, rng: 0.0, 1, 2)


def test_nested_bootstrap_total_dominates_within_and_is_reproducible():
    def run(seed):
        return nested_bootstrap_variance(
            lambda rng: rng.normal(size=3),
            lambda s, i: s if i is None else s + i,
            lambda s, rng: rng.normal(scale=0.5, size=3), 6, 4, seed=np.random.SeedSequence(seed))
    a, b = run(11), run(11)
    assert np.array_equal(a.total, b.total)
    assert np.all(a.total >= a.within)
    assert np.all(a.n_outer == 6)


@pytest.fixture(scope="module")
def pipeline_inputs(dataset, turnout_dataset, fitted):
    est = fitted.estimate_
    mle = TurnoutMLE().fit(turnout_dataset, est.zeta, est.cov)
    sub = dataset.subset(np.arange(120))
    pipe = ExtrapolationPipeline(sub, make_grid(0.02, 0.3, 5), kappa=0.05)
    return pipe, est.zeta, est.eta, mle.params_


def test_pipeline_counterfactuals(pipeline_inputs):
    pipe, zeta, eta, turnout = pipeline_inputs
    cs = pipe.counterfactuals(zeta, eta, turnout)
    assert cs.shape == (120, 5)
    assert cs.valid.mean() > 0.95
    for name in ("P", "H", "tau", "N"):
        assert cs.baseline[name].shape == (120,) and cs.treated[name].shape == (120, 5)
    # housing supply is log-linear in the rent, so the arc elasticities are proportional
    eH, eP = cs.elasticity("H"), cs.elasticity("P")
    ok = cs.valid
    assert np.allclose(eH[ok], eta * eP[ok], atol=1e-10)
    # larger proposals are less popular on average
    assert monotonicity_violations(binned_margin_by_grid(cs)) <= 0.05
    recs = cs.records()
    assert len(recs) == ok.sum()
    r = recs[0]
    assert r.elasticities["P"] == pytest.approx(
        (np.log(r.potentials["P"][1]) - np.log(r.potentials["P"][0])) / r.dlogG)


def test_pipeline_cache(pipeline_inputs):
    pipe, zeta, eta, turnout = pipeline_inputs
    before = pipe.cache_hits
    c1 = pipe.curve(zeta, eta, turnout)
    c2 = pipe.curve(zeta, eta, turnout)
    assert pipe.cache_hits >= before + 1
    assert isinstance(c1, AveCurve)
    assert np.array_equal(c1.mean, c2.mean, equal_nan=True)
    # shifting turnout costs changes margins but not the equilibria
    shifted = np.array(turnout, float)
    shifted[0] += 0.5
    hits = pipe.cache_hits
    cs = pipe.counterfactuals(zeta, eta, shifted)
    assert pipe.cache_hits == hits + 1
    assert not np.allclose(cs.margin, pipe.counterfactuals(zeta, eta, turnout).margin)


def test_mode_validation(pipeline_inputs):
    pipe, zeta, eta, turnout = pipeline_inputs
    bad = ExtrapolationPipeline(pipe.ds, pipe.grid, mode="psychic")
    with pytest.raises(ValueError):
        bad.counterfactuals(zeta, eta, turnout)
