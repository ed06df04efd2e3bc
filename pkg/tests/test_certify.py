import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from certunlearn.certify import (
    CouplingRun,
    achieved_epsilon,
    bound_learning_divergence,
    bound_unlearn_coupling,
    check_coupling,
    couple,
    coupling_suite,
    gaussian_sigma,
    generalization_bound,
    generalization_report,
    gradnorm_report,
    pl_bound,
    pl_utility_report,
    run_coupling,
    verify_config,
)
from certunlearn.model import SplitSpec, empirical_grad, split
from certunlearn.problems import PROBLEMS, PLConstants, make_rng
from certunlearn.train import TrainConfig, certify_setup, init_theta
from certunlearn.unlearn import PrivacyBudget, calibrate_sigma

ULP = 4 * np.finfo(float).eps
BUDGET = PrivacyBudget(1.0, 1e-5)


def test_learning_divergence_examples():
    assert bound_learning_divergence(0, 0.1, 1.0, 1.0, 10, 2) == 0.0
    assert all(bound_learning_divergence(t, 0.1, 1.0, 1.0, 10, 0) == 0.0 for t in range(20))
    assert bound_learning_divergence(1, 1.0, 1.0, 1.0, 2, 1) == pytest.approx(2.0, rel=ULP)
    with pytest.raises(ValueError):
        bound_learning_divergence(1, 0.1, 1.0, 1.0, 3, 3)


def test_unlearn_coupling_examples():
    assert bound_unlearn_coupling(0.7, 0.3, 2.0, 0) == 0.7
    assert bound_unlearn_coupling(0.0, 0.3, 2.0, 9) == 0.0
    assert bound_unlearn_coupling(1.0, 1.0, 1.0, 3) == 8.0


def test_gaussian_sigma_examples():
    assert gaussian_sigma(0.0, 1.0, 1e-5) == 0.0
    assert gaussian_sigma(1.0, 1.0, 1.25 / math.e) == pytest.approx(math.sqrt(2), rel=ULP)
    assert gaussian_sigma(2.0, 0.5, 1e-3) == 2 * gaussian_sigma(1.0, 0.5, 1e-3)


def test_achieved_epsilon_examples():
    cert = calibrate_sigma(BUDGET, 2.0, 1.0, 50, 3, 0.2, 30, 10)
    assert achieved_epsilon(cert.bound, cert.sigma, BUDGET.delta) == pytest.approx(BUDGET.eps, rel=1e-14)
    assert achieved_epsilon(0.5 * cert.bound, cert.sigma, BUDGET.delta) < BUDGET.eps
    assert achieved_epsilon(0.0, cert.sigma, BUDGET.delta) == 0.0
    assert achieved_epsilon(1e-3, 0.0, BUDGET.delta) == math.inf


def test_no_forget_distances_zero():
    p = PROBLEMS["logistic"]
    data = p.generate(20, None, 0)
    run = run_coupling(p.model(), data, SplitSpec(), init_theta(5, 0), TrainConfig(0.1, 20, 5))
    assert np.all(run.deltas == 0) and np.all(run.deltas_unlearn == 0) and run.final_distance == 0


def test_run_coupling_agrees_with_shared_runs():
    p = PROBLEMS["least_squares"]
    data = p.generate(30, None, 1)
    th0 = init_theta(5, 1)
    a = run_coupling(p.model(), data, SplitSpec.last(30, 2), th0, TrainConfig(0.2, 25, 7))
    (b,) = couple(p.model(), data, SplitSpec.last(30, 2), th0, 0.2, 25, [7])
    assert a.theta.tobytes() == b.theta.tobytes() and a.theta_unlearn.tobytes() == b.theta_unlearn.tobytes()
    assert a.deltas[0] == 0.0


@pytest.mark.parametrize("name", sorted(PROBLEMS))
def test_coupling_bounds_hold(name):
    p = PROBLEMS[name]
    data = p.generate(50, None, 7)
    th0 = init_theta(p.model().dim, 7)
    setup = certify_setup(p, data, th0, 60, seed=7)
    for run in couple(setup.model, data, SplitSpec.last(50, 5), th0, setup.eta, 60, [0, 15, 30, 60]):
        chk = check_coupling(run, setup.constants)
        assert chk.passed and chk.in_tube and chk.worst_margin >= 0


def test_understated_constants_caught():
    p = PROBLEMS["logistic"]
    data = p.generate(50, None, 0)
    th0 = init_theta(5, 0)
    setup = certify_setup(p, data, th0, 50, seed=0)
    (run,) = couple(setup.model, data, SplitSpec.last(50, 5), th0, setup.eta, 50, [0])
    assert not check_coupling(run, setup.constants.scaled(g_scale=0.01)).passed


@pytest.mark.parametrize("name", sorted(PROBLEMS))
def test_gradnorm_degenerate_case(name):
    p = PROBLEMS[name]
    data = p.generate(40, None, 2)
    th0 = init_theta(p.model().dim, 2)
    setup = certify_setup(p, data, th0, 40, seed=2)
    (run,) = couple(setup.model, data, SplitSpec(), th0, setup.eta, 40, [40])
    rep = gradnorm_report(run, setup.model, data, setup.constants, 0.0, 10, make_rng(0, "g"))
    assert rep.passed


def test_gradnorm_logistic_example():
    p = PROBLEMS["logistic"]
    data = p.generate(200, None, 0)
    th0 = init_theta(5, 0)
    setup = certify_setup(p, data, th0, 50, seed=0)
    spec = SplitSpec.last(200, 2)
    retain, _ = split(data, spec)
    (run,) = couple(setup.model, data, spec, th0, setup.eta, 50, [25])
    sigma = calibrate_sigma(BUDGET, setup.constants.G, setup.constants.L, 200, 2, setup.eta, 50, 25).sigma
    rep = gradnorm_report(run, setup.model, retain, setup.constants, sigma, 1000, make_rng(0, "g"))
    assert rep.passed and rep.draws == 1000


def test_gradnorm_noise_free_term_exact():
    p = PROBLEMS["sine_pl"]
    data = p.generate(30, None, 0)
    th0 = init_theta(1, 0)
    setup = certify_setup(p, data, th0, 20, seed=0)
    spec = SplitSpec.last(30, 3)
    retain, _ = split(data, spec)
    (run,) = couple(setup.model, data, spec, th0, setup.eta, 20, [5])
    rep = gradnorm_report(run, setup.model, retain, setup.constants, 0.0, 50, make_rng(0, "g"))
    g = empirical_grad(setup.model, retain, run.theta_K)
    assert rep.noisy_mean == float(np.sum(g**2)) and rep.noisy_se == 0.0
    assert rep.lhs == rep.lhs_noise_free


def test_gradnorm_tallies():
    p = PROBLEMS["scalar_quadratic"]
    data = p.generate(10, None, 0)
    th0 = init_theta(1, 0)
    spec = SplitSpec.last(10, 1)
    retain, _ = split(data, spec)
    (run,) = couple(p.model(), data, spec, th0, 0.5, 8, [3])
    rep = gradnorm_report(run, p.model(), retain, PROBLEMS["scalar_quadratic"].region_constants(
        p.model(), data, th0, 5.0), 0.0, 5, make_rng(0, "g"))
    sq = lambda th: float(np.sum(empirical_grad(p.model(), retain, th) ** 2))  # noqa: E731
    learn = sum(sq(run.theta[t]) for t in range(5))
    unl = [sq(run.theta_unlearn[t]) for t in range(4)]
    assert rep.lhs == pytest.approx((learn + sum(unl[:3]) + unl[3]) / 8, rel=1e-14)
    assert rep.lhs_derivation == pytest.approx((learn + sum(unl)) / 8, rel=1e-14)


def test_pl_classic_rate_quadratic():
    p = PROBLEMS["scalar_quadratic"]
    data = p.generate(30, None, 0)
    th0 = init_theta(1, 0)
    setup = certify_setup(p, data, th0, 40, seed=0)
    (run,) = couple(setup.model, data, SplitSpec(), th0, setup.eta, 40, [40])
    pl = p.pl_constants(setup.model, data)
    rep = pl_utility_report(run, setup.model, data, setup.constants, pl, 0.0, 10, make_rng(0, "p"))
    assert rep.passed and rep.noise_free_passed
    gap0 = 0.5 * float((th0[0] - data.X.mean()) ** 2)
    assert rep.noise_free_bound == pytest.approx((1 - setup.eta) ** 40 * gap0, rel=1e-12)


def test_pl_requires_constants():
    p = PROBLEMS["tiny_mlp"]
    data = p.generate(10, None, 0)
    (run,) = couple(p.model(), data, SplitSpec(), init_theta(17, 0), 0.01, 3, [1])
    with pytest.raises(ValueError, match="not a PL problem"):
        pl_utility_report(run, p.model(), data, PROBLEMS["tiny_mlp"].region_constants(
            p.model(), data, init_theta(17, 0), 1.0), None, 0.0, 5, make_rng(0, "p"))
    with pytest.raises(ValueError, match="not a PL problem"):
        pl_utility_report(run, p.model(), data, None, PLConstants(None, 0.0), 0.0, 5, make_rng(0, "p"))


@settings(max_examples=50, deadline=None)
@given(etaL=st.floats(1e-3, 0.5), mu_frac=st.floats(0.01, 1.0), L=st.floats(0.1, 10), G=st.floats(0.1, 10),
       n=st.integers(2, 300), T=st.integers(1, 200), sigma=st.floats(0, 10), d=st.integers(1, 5), data=st.data())
def test_pl_bound_against_mpmath(etaL, mu_frac, L, G, n, T, sigma, d, data):
    m = data.draw(st.integers(0, n - 1))
    K = data.draw(st.integers(0, T))
    eta, mu, gap0 = etaL / L, mu_frac * L, 1.7
    nf, full = pl_bound(eta, mu, L, G, n, m, T, K, gap0, sigma, d)
    with mpmath.workdps(40):
        e, u, LL, GG = map(mpmath.mpf, (eta, mu, L, G))
        c = (1 - e * u * (n - m) / n) ** (T - K) * (1 - e * u) ** K
        ref_nf = c * mpmath.mpf(gap0) + (1 - e * u) ** K * (GG**2 * m + LL * e * GG * m) / (u * (n - m))
        ref = LL * mpmath.sqrt(d) * mpmath.mpf(sigma) + ref_nf
    assert nf == pytest.approx(float(ref_nf), rel=1e-12, abs=1e-300)
    assert full == pytest.approx(float(ref), rel=1e-12, abs=1e-300)


def test_generalization_bound_monotone_in_m():
    vals = [generalization_bound(0.1, 1.0, 1.0, 2.0, 100, m, 50, 10, 1.0, 0.0, 1) for m in range(0, 99)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_generalization_degenerate_case():
    rep = generalization_report(PROBLEMS["scalar_quadratic"], 50, 0, 30, 30, BUDGET, redraws=5, draws=20,
                                fresh_samples=500)
    assert rep.passed
    assert np.allclose(rep.gaps, rep.closed_form_gaps, atol=0.2)


def test_generalization_requires_population():
    with pytest.raises(ValueError, match="population"):
        generalization_report(PROBLEMS["logistic"], 20, 1, 5, 5, BUDGET)


def test_verify_config_report():
    rep = verify_config(PROBLEMS["logistic"], 50, 1, 20, 10, range(3), BUDGET, draws=50, pl_draws=10)
    assert rep.coupling_ok and rep.privacy_ok and rep.pl_ok is None
    assert rep.seeds == [0, 1, 2]
    assert len(rep.step_rows) == 3 * 21
    assert all(margin >= 0 for *_, margin in rep.step_rows)
    bad = verify_config(PROBLEMS["logistic"], 50, 5, 50, 0, range(3), BUDGET, draws=50, g_scale=0.01)
    assert not bad.coupling_ok and not bad.passed


def test_coupling_suite_deterministic():
    args = ([PROBLEMS["sine_pl"]], range(2), BUDGET)
    kw = dict(ns=(30,), ms=(1, 3), Ts=(20,))
    a = coupling_suite(*args, **kw)
    b = coupling_suite(*args, **kw)
    assert len(a.rows) == 2 * 2 * 4
    assert [r.__dict__ for r in a.rows] == [r.__dict__ for r in b.rows]
    assert a.passed and a.violations == 0 and a.tube_exits == 0


def test_coupling_run_invariants():
    run = CouplingRun(0.1, 2, 1, 5, 1, np.zeros((3, 2)), np.ones((3, 2)), np.ones((2, 2)), np.zeros(2))
    assert run.deltas[0] == pytest.approx(math.sqrt(2))
    assert np.all(run.deltas_unlearn == 0)
