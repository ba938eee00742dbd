"""Acceptance criteria, one test and one PASS/FAIL line each.

Run alone with ``python3 -m pytest tests/test_acceptance.py -v``; the lines
are printed in the "acceptance criteria" section of the terminal summary.
"""
import numpy as np
import pytest

from rdextrap.dgp import DgpConfig, simulate_dataset
from rdextrap.equilibrium import solve_equilibrium
from rdextrap.extrap import (ExtrapolationPipeline, bin_edges, binned_margin_by_grid, make_grid,
                             monotonicity_violations, SIMULATION_GRID)
from rdextrap.ident import (PreferenceEstimator, first_stage,
                            solve_two_district, two_district_jacobian)
from rdextrap.mle import TurnoutMLE, rubin_combine
from rdextrap.model import HouseholdType, choice_probabilities, myopic_value_curvature
from rdextrap.rdd import RddSample, fuzzy_rd_known_first_stage, local_linear_fit, shrink_correlation
from rdextrap.cli import rdd_table

N_REPS = 20
TRUE_A = np.array([0.55, 0.20, 0.15, 0.10])
TRUE_G = np.array([0.35, 0.30, 0.25, 0.20])
TRUE_ETA = 0.6
TRUE_MU0 = np.array([-3.0, -5.0, -7.0, -3.0])
TRUE_MU1 = np.array([-1.0, -1.0, 0.0, 0.0])
TRUE_SIGMA0 = 3.0


def _report(lines, number, ok, detail):
    lines.append(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


@pytest.fixture(scope="module")
def replications():
    """Preference, elasticity and turnout estimates for the desk-scale replications."""
    config = DgpConfig()
    out = []
    for rep in range(N_REPS):
        ds = simulate_dataset(config, replication=rep)
        est = PreferenceEstimator().fit(ds).estimate_
        dt = simulate_dataset(config.for_turnout(), replication=rep)
        mle = TurnoutMLE().fit(dt, est.zeta, est.cov)
        out.append({"a": est.a, "g": est.g, "eta": est.eta, "mu0": mle.mu0_, "mu1": mle.mu1_,
                    "sigma0": mle.sigma0_[0], "grad": mle.fit_.grad_norm})
    return out


def test_criterion_1_preferences(replications, acceptance_report):
    a = np.mean([r["a"] for r in replications], axis=0)
    g = np.mean([r["g"] for r in replications], axis=0)
    dev = max(np.max(np.abs(a - TRUE_A)), np.max(np.abs(g - TRUE_G)))
    ok = _report(acceptance_report, 1, dev <= 0.02,
                 f"max |mean - truth| over a, g = {dev:.4f} (tol 0.02); "
                 f"a = {np.round(a, 4).tolist()}, g = {np.round(g, 4).tolist()}")
    assert ok


def test_criterion_2_eta(replications, acceptance_report):
    eta = np.mean([r["eta"] for r in replications])
    ok = _report(acceptance_report, 2, abs(eta - TRUE_ETA) <= 0.02,
                 f"mean eta = {eta:.4f} (truth 0.6, tol 0.02)")
    assert ok


def test_criterion_3_turnout(replications, acceptance_report):
    mu0 = np.mean([r["mu0"] for r in replications], axis=0)
    mu1 = np.mean([r["mu1"] for r in replications], axis=0)
    s0 = np.mean([r["sigma0"] for r in replications])
    d0, d1, ds = np.max(np.abs(mu0 - TRUE_MU0)), np.max(np.abs(mu1 - TRUE_MU1)), abs(s0 - TRUE_SIGMA0)
    ok = _report(acceptance_report, 3, d0 <= 0.1 and d1 <= 0.15 and ds <= 0.05,
                 f"max dev mu0 = {d0:.4f} (tol 0.1), mu1 = {d1:.4f} (tol 0.15), "
                 f"sigma0 = {ds:.4f} (tol 0.05)")
    assert ok


@pytest.fixture(scope="module")
def large():
    """One 50,000-referendum dataset with its fuzzy RDD price estimate and true effects."""
    ds = simulate_dataset(DgpConfig(n_referenda=50_000), replication=0)
    rows = np.arange(len(ds))
    j = ds.district
    dP = np.log(ds.post.P[rows, j]) - np.log(ds.pre.P[rows, j])
    est = fuzzy_rd_known_first_stage(RddSample(ds.margin, dP, first_stage(ds)))
    effect = np.log(ds.treated.P[rows, j]) - np.log(ds.pre.P[rows, j])
    return ds, est, effect


def test_criterion_4_cutoff_oracle(large, acceptance_report):
    ds, est, effect = large
    # oracle: weights proportional to dlogG, potential outcomes for every record near the cutoff
    near = np.abs(ds.margin) < 0.02
    num, den = effect[near], ds.dlogG[near]
    oracle = num.sum() / den.sum()
    oracle_se = np.sqrt(np.sum((num - oracle * den) ** 2)) / den.sum()
    z = (est.estimate_bc - oracle) / np.hypot(est.se, oracle_se)
    ok = _report(acceptance_report, 4, abs(z) <= 2.0,
                 f"fuzzy RDD {est.estimate_bc:.5f} (se {est.se:.5f}) vs oracle {oracle:.5f} "
                 f"(se {oracle_se:.5f}, n = {near.sum()}): {z:.2f} combined se (tol 2)")
    assert ok


def test_cutoff_value_from_local_fit(large):
    """Diagnostic beside criterion 4: the same potential outcomes, evaluated at the cutoff.

    The window mean above averages the true effect over |S| < 0.02, where it
    bends away from its cutoff value; one-sided local quadratics recover the
    cutoff value itself, which is what the RDD targets.
    """
    ds, est, effect = large
    h = 0.05
    limits = [local_linear_fit(ds.margin, effect, side, h, degree=2)[0]
              / local_linear_fit(ds.margin, ds.dlogG, side, h, degree=2)[0]
              for side in ("left", "right")]
    assert abs(limits[0] - limits[1]) < est.se
    assert abs(est.estimate_bc - np.mean(limits)) < 2 * est.se


@pytest.fixture(scope="module")
def counterfactuals(dataset, turnout_dataset, fitted):
    est = fitted.estimate_
    mle = TurnoutMLE().fit(turnout_dataset, est.zeta, est.cov)
    pipe = ExtrapolationPipeline(dataset, make_grid(*SIMULATION_GRID), kappa=0.005)
    cs = pipe.counterfactuals(est.zeta, est.eta, mle.params_)
    return pipe, cs, est.eta, (est.zeta, est.eta, mle.params_)


def test_criterion_5_shape(counterfactuals, acceptance_report):
    pipe, cs, _, args = counterfactuals
    margins = binned_margin_by_grid(cs)
    viol = monotonicity_violations(margins)
    curve = pipe.curve(*args)
    right = curve.mean[bin_edges(0.005) >= 0][:4]
    ok_a = viol <= 0.05
    ok_b = bool(np.all(np.isfinite(right)) and np.all(right > 0))
    ok = _report(acceptance_report, 5, ok_a and ok_b,
                 f"(a) margin by grid {margins[0]:.3f} -> {margins[-1]:.3f}, violations {viol:.1%} "
                 f"(tol 5%); (b) price AVE right of cutoff {np.round(right, 4).tolist()}")
    assert ok


def test_criterion_6_numerical_properties(economy, fitted, counterfactuals, replications,
                                          acceptance_report, rng):
    checks = {}
    state = solve_equilibrium(economy)
    checks["equilibrium residual < 1e-10"] = float(state.residual) < 1e-10
    v = rng.normal(0, 5, (1000, 11))
    checks["logit shares sum to 1"] = np.max(np.abs(choice_probabilities(v).sum(axis=-1) - 1)) < 1e-12
    _, cs, eta, _ = counterfactuals
    eH, eP = cs.elasticity("H"), cs.elasticity("P")
    checks["housing identity to 1e-10"] = np.max(np.abs(eH - eta * eP)[cs.valid]) < 1e-10
    t = fitted.inputs_[0].theta[:2].ravel()
    J = two_district_jacobian(t)
    num = np.empty_like(J)
    for i in range(18):
        e = np.zeros(18)
        e[i] = 1e-7 * max(1.0, abs(t[i]))
        num[:, i] = (np.array(solve_two_district(t + e)) - np.array(solve_two_district(t - e))) / (2 * e[i])
    checks["Jacobian rel. err < 1e-6"] = np.max(np.abs(J - num)) / np.max(np.abs(J)) < 1e-6
    checks["MLE gradient < 1e-6"] = max(r["grad"] for r in replications) < 1e-6
    P = rng.normal(size=(8, 4))
    est = rubin_combine(P, np.stack([np.eye(4)] * 8))
    checks["Rubin total - within PSD"] = np.min(np.linalg.eigvalsh(est.total - est.within)) >= -1e-12
    Z = rng.normal(size=(300, 6)) @ rng.normal(size=(6, 6))
    S, delta = shrink_correlation(Z.T @ Z, scores=Z)
    checks["Ledoit-Wolf PSD, delta in [0, 1]"] = (0 <= delta <= 1) and np.min(np.linalg.eigvalsh(S)) >= 0
    curv = []
    while len(curv) < 1000:
        a, g, y = rng.uniform(0.05, 0.6), rng.uniform(0.05, 0.6), rng.uniform(0.3, 1.0)
        p, tau = rng.uniform(0.01, 0.5) * y, rng.uniform(0.001, 0.5)
        if y - p * (1 + tau) > 0:
            curv.append(myopic_value_curvature(HouseholdType(a, g, y), p, tau))
    checks["SOC < 0 on 1000 states"] = max(curv) < 0
    failed = [k for k, ok in checks.items() if not ok]
    ok = _report(acceptance_report, 6, not failed,
                 f"{len(checks) - len(failed)}/{len(checks)} properties hold"
                 + (f"; failed: {failed}" if failed else ""))
    assert ok


def test_criterion_7_panel_relation(dataset, acceptance_report):
    frame = rdd_table(dataset)
    worst = 0.0
    for name, grp in frame.groupby("outcome"):
        sharp = grp[grp.design == "sharp"].iloc[0]
        fuzzy = grp[grp.design == "fuzzy"].iloc[0]
        worst = max(worst, abs(fuzzy.estimate - sharp.estimate / sharp.first_stage)
                    / abs(fuzzy.estimate))
    ok = _report(acceptance_report, 7, worst < 1e-10,
                 f"max rel. gap between Panel B and Panel A / first stage = {worst:.2e}")
    assert ok
