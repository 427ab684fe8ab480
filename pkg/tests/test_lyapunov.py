import numpy as np
import pytest
from hypothesis import given, strategies as st

from phnlab.em import EMConfig, simulate_chain
from phnlab.errors import BadConfig, EmptyInput, NotPositiveDefinite
from phnlab.lyapunov import (
    LyapunovSpec,
    _edge_split_c1,
    audit_report,
    fit_bounds,
    fit_drift_constants,
    generator_of_V,
    lyapunov_gradient,
    lyapunov_hessian,
    lyapunov_value,
    make_grid,
    matrix_inequalities,
    moment_bound_audit,
    phi,
    phi_ddot,
    phi_dot,
    solve_Qtilde,
    tune_lyapunov,
)
from phnlab.model import exponential_model


def kron_lyapunov(R):
    """Dense solve of Q(-R) + (-R)'Q = -I through the Kronecker form."""
    d = R.shape[0]
    A = -R
    I = np.eye(d)
    K = np.kron(I, A.T) + np.kron(A.T, I)
    return np.linalg.solve(K, -I.ravel(order="F")).reshape((d, d), order="F")


@pytest.mark.parametrize("z,expected", [(1.0, 1.0), (-1.0, -0.5), (0.0, 0.0), (-0.5, -0.40625), (-3.0, -0.5), (2.5, 2.5)])
def test_phi_examples(z, expected):
    assert phi(z) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("z0", [0.0, -1.0])
def test_phi_c2_at_branch_points(z0):
    h = 1e-6
    assert phi_dot(z0 - h) == pytest.approx(phi_dot(z0 + h), abs=1e-5)
    assert phi_ddot(z0 - h) == pytest.approx(phi_ddot(z0 + h), abs=1e-4)
    assert (phi(z0 + h) - phi(z0 - h)) / (2 * h) == pytest.approx(phi_dot(z0), abs=1e-6)


def test_phi_dot_at_zero():
    h = 1e-7
    assert (phi(h) - phi(0.0)) / h == pytest.approx(1.0, abs=1e-6)
    assert (phi(0.0) - phi(-h)) / h == pytest.approx(1.0, abs=1e-6)


@given(st.floats(-3, 3))
def test_phi_derivatives_fd(z):
    h = 1e-5
    assert (phi(z + h) - phi(z - h)) / (2 * h) == pytest.approx(phi_dot(z), abs=1e-7)
    assert (phi_dot(z + h) - phi_dot(z - h)) / (2 * h) == pytest.approx(phi_ddot(z), abs=1e-4)


def test_solve_Qtilde_scalar():
    Q = solve_Qtilde(np.array([[1.0]]), np.array([1.0]))
    np.testing.assert_allclose(Q, [[1.0]])
    m1, m2 = matrix_inequalities(Q, [[1.0]], [1.0])
    assert m1 == pytest.approx(-2.0) and m2 == pytest.approx(0.0, abs=1e-15)


def test_plain_lyapunov_solution_fails_second_inequality_for_erlang(erlang):
    Q = kron_lyapunov(erlang.R)
    Q /= np.abs(Q).sum()
    m1, m2 = matrix_inequalities(Q, erlang.R, erlang.p)
    assert m1 < 0
    assert m2 > 1e-3


@pytest.mark.parametrize("name", ["expo", "erlang", "three_phase"])
def test_solve_Qtilde_satisfies_both(name, request):
    m = request.getfixturevalue(name)
    Q = solve_Qtilde(m.R, m.p)
    assert np.abs(Q).sum() == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(Q, Q.T, atol=1e-14)
    assert np.linalg.eigvalsh(Q)[0] > 0
    m1, m2 = matrix_inequalities(Q, m.R, m.p)
    assert m1 < 0 and m2 <= 1e-10
    LyapunovSpec(Q)


def test_solve_Qtilde_not_hurwitz(erlang):
    with pytest.raises(NotPositiveDefinite):
        solve_Qtilde(-erlang.R, erlang.p)


def test_spec_validation():
    with pytest.raises(BadConfig):
        LyapunovSpec(np.array([[0.5, 0.1], [0.0, 0.4]]))
    with pytest.raises(BadConfig):
        LyapunovSpec(np.eye(2))
    with pytest.raises(NotPositiveDefinite):
        LyapunovSpec(np.array([[0.25, -0.25], [-0.25, 0.25]]))


def test_V_examples(erlang):
    spec = LyapunovSpec(solve_Qtilde(erlang.R, erlang.p))
    assert lyapunov_value(erlang, spec, np.zeros(2)) == 0.0
    m = exponential_model()
    assert lyapunov_value(m, LyapunovSpec([[1.0]]), [2.0]) == pytest.approx(4.0)


@pytest.mark.parametrize("name", ["expo", "erlang", "three_phase"])
def test_derivatives_match_finite_differences(name, request):
    m = request.getfixturevalue(name)
    spec = LyapunovSpec(solve_Qtilde(m.R, m.p), kappa=1.7, c_hat2=0.3)
    rng = np.random.default_rng(4)
    Y = rng.normal(scale=2.0, size=(400, m.d))
    s = Y.sum(axis=1)
    keep = (np.abs(s) > 1e-3) & (np.abs(s + 1) > 1e-3)
    Y = Y[keep][:100]
    h = 1e-5
    I = np.eye(m.d)
    for y in Y:
        g = lyapunov_gradient(m, spec, y)
        H = lyapunov_hessian(m, spec, y)
        g_fd = np.array([(lyapunov_value(m, spec, y + h * u) - lyapunov_value(m, spec, y - h * u)) / (2 * h) for u in I])
        H_fd = np.array([(lyapunov_gradient(m, spec, y + h * u) - lyapunov_gradient(m, spec, y - h * u)) / (2 * h) for u in I])
        assert np.linalg.norm(g - g_fd) <= 1e-5 * max(1.0, np.linalg.norm(g))
        assert np.linalg.norm(H - H_fd) <= 1e-5 * max(1.0, np.linalg.norm(H))
    # batched evaluation agrees with pointwise
    np.testing.assert_allclose(lyapunov_gradient(m, spec, Y), [lyapunov_gradient(m, spec, y) for y in Y])


def test_fit_scalar_example():
    m = exponential_model(alpha=1.0, beta=0.0)
    spec = LyapunovSpec([[1.0]], kappa=0.0)
    for grid in (make_grid(1, 2000, radius=5.0), make_grid(1, 10_000, radius=20.0, seed=3)):
        fit = fit_drift_constants(m, spec, grid)
        assert fit.c1 == pytest.approx(2.0, rel=1e-9)
        assert fit.c1_breve == pytest.approx(2.0, rel=1e-9)
        assert fit.violations == []


def test_fit_scaling_V():
    m = exponential_model(alpha=1.0, beta=0.0)
    grid = make_grid(1, 2000, radius=5.0)
    spec = LyapunovSpec([[1.0]], kappa=0.0)
    base = fit_drift_constants(m, spec, grid)
    V = 2 * np.asarray(lyapunov_value(m, spec, grid))
    A = 2 * np.asarray(generator_of_V(m, spec, grid))
    c1 = _edge_split_c1(V, A)
    assert c1 == pytest.approx(base.c1, rel=1e-9)
    assert max(0.0, float(np.max(A + c1 * V))) == pytest.approx(2 * base.c1_breve, rel=1e-9)


def test_fit_rejects_single_point(expo):
    with pytest.raises(BadConfig):
        fit_drift_constants(expo, LyapunovSpec([[1.0]]), np.zeros((1, 1)))
    with pytest.raises(BadConfig):
        make_grid(1, n_points=1)


def test_make_grid_layout():
    g = make_grid(3, 5000, radius=20.0, seed=1)
    assert g.shape == (5000, 3)
    assert np.all(np.linalg.norm(g, axis=1) <= 20.0 + 1e-12)
    np.testing.assert_array_equal(g[0], 0.0)


@pytest.mark.parametrize("name", ["expo", "erlang"])
def test_tuned_fit_and_bounds_on_fresh_grid(name, request):
    m = request.getfixturevalue(name)
    spec, fit = tune_lyapunov(m, make_grid(m.d, 10_000, seed=0))
    assert fit.c1 > 0 and fit.c1_breve >= 0 and fit.violations == []
    assert spec.fitted == (fit.c1, fit.c1_breve)
    b = fit_bounds(m, spec, make_grid(m.d, 10_000, seed=0))
    assert b.c_hat1 > 0
    fresh = make_grid(m.d, 10_000, seed=99)
    V = np.asarray(lyapunov_value(m, spec, fresh))
    r2 = np.sum(fresh**2, axis=1)
    # sandwich and gradient growth with a 5% margin for off-grid points
    assert np.all(V >= 0.95 * b.c_hat1 * r2)
    assert np.all(V <= 1.05 * (b.C_hat1 * r2 + b.C_hat2 + spec.c_hat2))
    G = np.linalg.norm(lyapunov_gradient(m, spec, fresh), axis=1)
    assert np.all(G <= 1.05 * b.grad_C * (1 + np.sqrt(r2)))
    rep = audit_report(fit)
    assert set(rep) >= {"c1", "c1_breve", "grid_size", "violations", "kappa", "c_hat2"}


@pytest.fixture(scope="module")
def ou_audit():
    m = exponential_model(alpha=1.0, beta=1.0)
    spec, fit = tune_lyapunov(m, make_grid(1, 10_000))
    cfg = EMConfig(eta=0.01, n_steps=1000, x0=(3.0,), seed=7)
    trajs = [simulate_chain(m, cfg, chain_id=c) for c in range(400)]
    return m, spec, fit, trajs


def test_moment_audit_holds(ou_audit):
    m, spec, fit, trajs = ou_audit
    rep = moment_bound_audit(m, trajs, spec, 1, fit.c1, fit.c1_breve)
    assert rep.mean_Vl[0] / rep.bound[0] == 1.0
    assert rep.times[0] == 0.0
    assert rep.violations == []
    # long-time level sits below c_breve / c1 within 3 standard errors
    assert rep.mean_Vl[-1] - 3 * rep.stderr[-1] <= fit.c1_breve / fit.c1


def test_moment_audit_negative_control(ou_audit):
    m, spec, fit, trajs = ou_audit
    rep = moment_bound_audit(m, trajs, spec, 1, 10 * fit.c1, fit.c1_breve)
    assert rep.violations


def test_moment_audit_empty(expo):
    with pytest.raises(EmptyInput):
        moment_bound_audit(expo, [], LyapunovSpec([[1.0]]), 1, 1.0, 1.0)
