"""Acceptance criteria, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per
criterion is printed in the terminal summary.
"""

import math

import numpy as np
import pytest
from scipy import stats as sps

from phnlab.em import one_step_coupling_error, sample_invariant
from phnlab.lyapunov import (
    lyapunov_gradient,
    lyapunov_value,
    make_grid,
    solve_Qtilde,
    tune_lyapunov,
)
from phnlab.model import drift, erlang2_model, exponential_model, smoothed_drift
from phnlab.occupation import occupation_scaling_check
from phnlab.parallel import default_workers
from phnlab.queue_sim import QueueConfig, birth_death_chi2, steady_state_compare
from phnlab.stats import (
    clt_experiment,
    exact_1d_invariant,
    mdp_gaussian_surrogate,
    mdp_rate_check,
    w1_convergence_sweep,
    w1_to_distribution,
)

WORKERS = default_workers()


@pytest.fixture(scope="module")
def ou():
    return exponential_model(alpha=1.0, beta=1.0)


@pytest.fixture(scope="module")
def normal_law():
    return exact_1d_invariant(1.0, 1.0)


def test_criterion_01_coefficients(acceptance):
    m = erlang2_model()
    err = max(
        np.max(np.abs(m.R - [[2, 0], [-2, 2]])),
        np.max(np.abs(m.gamma - [0.5, 0.5])),
        np.max(np.abs(m.SigmaSq - [[2, -1], [-1, 2]])),
        abs(exponential_model().SigmaSq[0, 0] - 2.0),
    )
    assert acceptance(1, err <= 1e-12, f"max coefficient error {err:.2e} (tol 1e-12)")


def test_criterion_02_invariant_measure(acceptance, ou, normal_law):
    eta = 1e-3
    s = sample_invariant(ou, eta, 100_000, gap=math.ceil(1 / eta), burn_in=10_000, seed=0)
    w1 = w1_to_distribution(s.points[:, 0], normal_law.ppf)
    assert acceptance(2, w1 <= 0.02, f"W1(EM eta=1e-3, N(-1,1)) = {w1:.4f} (tol 0.02)")


def test_criterion_03_rate_sweep(acceptance, ou, normal_law):
    cfg = dict(n_samples=100_000, burn_in=10_000, seed=0, n_chains=8)
    t = w1_convergence_sweep(ou, [0.2, 0.1, 0.05, 0.025], cfg, normal_law, n_workers=WORKERS)
    ok = t.non_increasing and t.within_envelope(1.5) and t.slope >= 0.4
    w = ", ".join(f"{r.eta:g}:{r.w1:.4f}" for r in t.rows)
    assert acceptance(3, ok, f"W1 by eta [{w}], slope {t.slope:.3f} (>= 0.4), C {t.C:.4f}")


def test_criterion_04_queue(acceptance, ou, normal_law):
    w = {}
    for n in (25, 100):
        cfg = QueueConfig.for_model(ou, n, horizon=50.0 + 50_000, seed=1)
        w[n] = steady_state_compare(cfg, oracle=normal_law).w1_oracle
    chi = birth_death_chi2(QueueConfig.for_model(ou, 5, horizon=200_000.0, seed=1))
    ok = w[100] <= 0.7 * w[25] and chi.p_value > 0.01
    assert acceptance(
        4, ok, f"W1 n=25 {w[25]:.4f}, n=100 {w[100]:.4f} (ratio {w[100] / w[25]:.3f} <= 0.7); chi2 p {chi.p_value:.3f}"
    )


def test_criterion_05_clt(acceptance, ou):
    rep = clt_experiment(ou, {"type": "indicator_e", "c": 0.0}, 0.01, 100_000, 200, seed=0, n_workers=WORKERS)
    target = sps.norm.cdf(-1)
    gap = abs(rep.mean_of_averages - target)
    ok = rep.p_value > 0.01 and gap <= 0.005
    assert acceptance(5, ok, f"KS p {rep.p_value:.3f} (> 0.01), mean {rep.mean_of_averages:.5f} vs {target:.5f}")


def test_criterion_06_lyapunov(acceptance):
    details, ok = [], True
    rng = np.random.default_rng(6)
    for name, m in (("d=1", exponential_model()), ("erlang2", erlang2_model())):
        grid = make_grid(m.d, 10_000, radius=20.0, seed=0)
        spec, fit = tune_lyapunov(m, grid, Q=solve_Qtilde(m.R, m.p))
        Y = rng.normal(scale=3.0, size=(400, m.d))
        s = Y.sum(axis=1)
        Y = Y[(np.abs(s) > 1e-3) & (np.abs(s + 1) > 1e-3)][:100]
        h, worst = 1e-5, 0.0
        for y in Y:
            g = lyapunov_gradient(m, spec, y)
            fd = np.array([(lyapunov_value(m, spec, y + h * u) - lyapunov_value(m, spec, y - h * u)) / (2 * h)
                           for u in np.eye(m.d)])
            worst = max(worst, np.linalg.norm(g - fd) / max(1.0, np.linalg.norm(g)))
        ok &= fit.c1 > 0 and not fit.violations and worst <= 1e-5
        details.append(f"{name}: c1 {fit.c1:.3f}, violations {len(fit.violations)}, grad rel err {worst:.1e}")
    assert acceptance(6, ok, "; ".join(details))


def test_criterion_07_occupation(acceptance):
    rep = occupation_scaling_check(erlang2_model(), None, 10.0, [0.2, 0.1, 0.05], 500, seed=0, eta=1e-3,
                                   n_workers=WORKERS)
    ok = rep.max_pairwise_spread <= 0.2
    r = ", ".join(f"{x:.3f}" for x in rep.ratios)
    assert acceptance(7, ok, f"E L/eps = [{r}], spread {rep.max_pairwise_spread:.3f} (<= 0.2)")


def test_criterion_08_smoothing(acceptance):
    ok, worst = True, 0.0
    for m in (exponential_model(), erlang2_model()):
        for eps in (0.1, 0.01):
            X = np.random.default_rng(8).normal(scale=3 * eps, size=(10_000, m.d))
            err = np.linalg.norm(smoothed_drift(m, X, eps) - drift(m, X), axis=1)
            ok &= bool(np.all(err <= m.C_op * eps))
            worst = max(worst, float(np.max(err / (m.C_op * eps))))
    assert acceptance(8, ok, f"max |g_eps - g| / (C_op eps) = {worst:.3f} (<= 1)")


def test_criterion_09_coupling(acceptance):
    m = erlang2_model()
    etas = np.array([0.1, 0.05, 0.025])
    v = [one_step_coupling_error(m, [0.5, 0.5], e, 10_000, seed=9).value for e in etas]
    slope = float(np.polyfit(np.log(etas), np.log(v), 1)[0])
    assert acceptance(9, 2.5 <= slope <= 3.5, f"one-step coupling slope {slope:.3f} (in [2.5, 3.5])")


def test_criterion_10_mdp(acceptance, ou):
    sur = mdp_gaussian_surrogate([100_000], 0.25, [1.0], 200, seed=0, n_workers=WORKERS)
    row = sur.rows[0]
    model = mdp_rate_check(ou, {"type": "indicator_e", "c": 0.0}, 0.05, [2_000], 0.25, [0.5, 1.0, 20.0], 200,
                           seed=0, n_workers=WORKERS)
    handled = all(r.zero_hits == (r.hits == 0) for r in model.rows) and bool(model.zero_hits)
    ok = 0.5 <= row.ratio <= 1.5 and handled
    assert acceptance(
        10, ok, f"surrogate rate ratio {row.ratio:.3f} (in [0.5, 1.5]); model report zero-hit cells {model.zero_hits}"
    )


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
