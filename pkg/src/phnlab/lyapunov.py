"""Quadratic-type Lyapunov function for the piecewise-linear diffusion.

    V(y) = (e'y)^2 + kappa [y - p phi(e'y)]' Q [y - p phi(e'y)] + c_hat2

``Q`` is a positive definite matrix, normalised so that its entries sum to
one in absolute value, with ``Q(-R) + (-R)'Q < 0`` and
``Q(-(I - p e')R) + (-R'(I - e p'))Q <= 0``.  The drift inequality
``A V <= -c1 V + c1_breve`` and the moment bounds it implies are audited
numerically on finite grids; nothing here is a proof.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy import optimize

from .errors import BadConfig, EmptyInput, Inequality2Violated, NoValidConstants, NotPositiveDefinite
from .model import DiffusionModel, generator_apply

INEQ2_TOL = 1e-10
NORM_TOL = 1e-10


def phi(z):
    """C^2 clamp: ``z`` for ``z >= 0``, ``-1/2`` for ``z <= -1``, quartic in between."""
    z = np.asarray(z, dtype=float)
    mid = -0.5 * z**4 - z**3 + z
    out = np.where(z >= 0, z, np.where(z <= -1, -0.5, mid))
    return out if out.ndim else float(out)


def phi_dot(z):
    z = np.asarray(z, dtype=float)
    mid = -2 * z**3 - 3 * z**2 + 1
    out = np.where(z >= 0, 1.0, np.where(z <= -1, 0.0, mid))
    return out if out.ndim else float(out)


def phi_ddot(z):
    z = np.asarray(z, dtype=float)
    mid = -6 * z**2 - 6 * z
    out = np.where((z > -1) & (z < 0), mid, 0.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True, eq=False)
class LyapunovSpec:
    Qtilde: np.ndarray
    kappa: float = 1.0
    c_hat2: float = 0.0
    fitted: tuple | None = None

    def __post_init__(self):
        Q = np.array(self.Qtilde, dtype=float, ndmin=2)
        if np.max(np.abs(Q - Q.T)) > 1e-12:
            raise BadConfig("Qtilde must be symmetric")
        if np.linalg.eigvalsh(Q)[0] <= 0:
            raise NotPositiveDefinite("Qtilde must be positive definite")
        if abs(np.abs(Q).sum() - 1.0) > NORM_TOL:
            raise BadConfig("Qtilde entries must sum to 1 in absolute value")
        if self.kappa < 0 or self.c_hat2 < 0:
            raise BadConfig("kappa and c_hat2 must be nonnegative")
        Q.setflags(write=False)
        object.__setattr__(self, "Qtilde", Q)

    def with_(self, **kw) -> "LyapunovSpec":
        d = {"Qtilde": self.Qtilde, "kappa": self.kappa, "c_hat2": self.c_hat2, "fitted": self.fitted}
        d.update(kw)
        return LyapunovSpec(**d)


def matrix_inequalities(Q, R, p) -> tuple[float, float]:
    """Largest eigenvalues of the two matrix expressions that must be negative (semi)definite."""
    Q = np.atleast_2d(Q)
    R = np.atleast_2d(R)
    p = np.asarray(p, dtype=float)
    d = len(p)
    M1 = Q @ (-R) + (-R).T @ Q
    A2 = (np.eye(d) - np.outer(p, np.ones(d))) @ R
    M2 = Q @ (-A2) + (-A2).T @ Q
    return float(np.linalg.eigvalsh(M1)[-1]), float(np.linalg.eigvalsh(0.5 * (M2 + M2.T))[-1])


def _constrained_search(R, p, Q0, restarts=6, seed=0):
    """Search symmetric ``Q`` with ``Q gamma`` parallel to ``e`` for both inequalities.

    Every ``Q`` in that subspace annihilates the second expression along
    ``Q^{-1} e``, so its top eigenvalue is zero; the search drives the
    remaining spectrum, the first expression and ``-lambda_min(Q)`` negative.
    """
    d = len(p)
    e = np.ones(d)
    gamma = np.linalg.solve(R, p)
    gamma = gamma / gamma.sum()
    iu = np.triu_indices(d)
    basis = []
    for i, j in zip(*iu):
        E = np.zeros((d, d))
        E[i, j] = E[j, i] = 1.0
        basis.append(E)
    basis = np.array(basis)
    centre = np.eye(d) - np.outer(e, e) / d
    C = np.array([centre @ (E @ gamma) for E in basis]).T
    N = sla.null_space(C)
    B = np.einsum("kij,kl->lij", basis, N)
    A2 = (np.eye(d) - np.outer(p, e)) @ R

    def q_of(c):
        Q = np.einsum("l,lij->ij", c, B)
        s = np.abs(Q).sum()
        return Q / s if s > 0 else Q

    def objective(c):
        Q = q_of(c)
        lam_q = np.linalg.eigvalsh(Q)[0]
        m1 = np.linalg.eigvalsh(Q @ (-R) + (-R).T @ Q)[-1]
        if lam_q <= 0:
            return max(m1, -lam_q) + 1.0
        M2 = Q @ (-A2) + (-A2).T @ Q
        U = sla.null_space(np.linalg.solve(Q, e)[None, :])
        m2 = np.linalg.eigvalsh(U.T @ M2 @ U)[-1] if U.size else -1.0
        return max(m1, m2, -lam_q)

    c0 = np.linalg.lstsq(B.reshape(len(B), -1).T, Q0.ravel(), rcond=None)[0]
    rng = np.random.default_rng(seed)
    best = None
    for t in range(restarts):
        start = c0 + (0.2 * t) * rng.standard_normal(c0.size) * np.abs(c0).max()
        res = optimize.minimize(objective, start, method="Nelder-Mead",
                                options={"maxiter": 4000, "xatol": 1e-12, "fatol": 1e-14})
        if best is None or res.fun < best.fun:
            best = res
        if best.fun < 0:
            break
    Q = q_of(best.x)
    return 0.5 * (Q + Q.T)


def solve_Qtilde(R, p) -> np.ndarray:
    """Positive definite ``Q`` for the Lyapunov function.

    First tries the solution of ``Q(-R) + (-R)'Q = -I`` rescaled to unit
    absolute sum.  If the second inequality fails beyond ``1e-10`` a
    constrained search over the subspace ``Q gamma || e`` runs; if that also
    fails, :class:`Inequality2Violated` reports the offending eigenvalue.
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    eig = np.linalg.eigvals(-R)
    if np.max(eig.real) >= 0:
        raise NotPositiveDefinite(
            f"-R is not Hurwitz (max real eigenvalue {np.max(eig.real):.3e}); no Lyapunov solution"
        )
    Q = sla.solve_continuous_lyapunov((-R).T, -np.eye(len(p)))
    Q = 0.5 * (Q + Q.T)
    Q = Q / np.abs(Q).sum()
    m1, m2 = matrix_inequalities(Q, R, p)
    if m1 < 0 and m2 <= INEQ2_TOL:
        return Q
    Q = _constrained_search(R, p, Q)
    m1, m2 = matrix_inequalities(Q, R, p)
    if not (m1 < 0 and m2 <= INEQ2_TOL and np.linalg.eigvalsh(Q)[0] > 0):
        raise Inequality2Violated(
            f"no Q found: inequality-1 eigenvalue {m1:.3e}, inequality-2 eigenvalue {m2:.3e}",
            eigenvalue=m2,
        )
    return Q


# ---------------------------------------------------------------------------
# V and derivatives (batched over leading axes)


def _parts(model, spec, y):
    y = np.asarray(y, dtype=float)
    s = y.sum(axis=-1)
    w = y - np.asarray(phi(s))[..., None] * model.p
    Qw = w @ spec.Qtilde
    return y, s, w, Qw


def lyapunov_value(model: DiffusionModel, spec: LyapunovSpec, y):
    y, s, w, Qw = _parts(model, spec, y)
    out = s**2 + spec.kappa * np.sum(w * Qw, axis=-1) + spec.c_hat2
    return out if np.ndim(out) else float(out)


def lyapunov_gradient(model: DiffusionModel, spec: LyapunovSpec, y) -> np.ndarray:
    y, s, w, Qw = _parts(model, spec, y)
    pQw = Qw @ model.p
    return 2 * s[..., None] + 2 * spec.kappa * (Qw - (phi_dot(s) * pQw)[..., None])


def lyapunov_hessian(model: DiffusionModel, spec: LyapunovSpec, y) -> np.ndarray:
    y, s, w, Qw = _parts(model, spec, y)
    d = model.d
    e = np.ones(d)
    pd = np.asarray(phi_dot(s))
    J = np.eye(d) - pd[..., None, None] * np.outer(model.p, e)
    JQJ = np.swapaxes(J, -1, -2) @ spec.Qtilde @ J
    curv = np.asarray(phi_ddot(s)) * (Qw @ model.p)
    ee = np.outer(e, e)
    return 2 * ee + 2 * spec.kappa * (JQJ - curv[..., None, None] * ee)


def generator_of_V(model: DiffusionModel, spec: LyapunovSpec, y) -> np.ndarray:
    return generator_apply(model, lyapunov_gradient(model, spec, y), lyapunov_hessian(model, spec, y), y)


# ---------------------------------------------------------------------------
# Grids and constant fitting


def make_grid(d: int, n_points: int = 10_000, radius: float = 20.0, seed: int = 0, n_ray: int = 50) -> np.ndarray:
    """Uniform points in the ball ``|y| <= radius`` plus points on the ``±axis`` and ``±e`` rays."""
    if n_points < 2:
        raise BadConfig("grid needs at least two points")
    dirs = [np.eye(d)[i] for i in range(d)] + [np.ones(d) / math.sqrt(d)]
    dirs = dirs + [-u for u in dirs]
    ts = np.linspace(radius / n_ray, radius, n_ray)
    rays = np.concatenate([np.outer(ts, u) for u in dirs])
    n_rand = max(n_points - len(rays), 0)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n_rand, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = radius * rng.random(n_rand) ** (1.0 / d)
    return np.concatenate([np.zeros((1, d)), rays, g * r[:, None]])[: max(n_points, 1)]


@dataclass
class DriftFit:
    c1: float
    c1_breve: float
    grid_size: int
    radius: float
    violations: list = field(default_factory=list)
    kappa: float = float("nan")
    c_hat2: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def _edge_split_c1(V, A):
    """Largest ``c`` whose bound ``max(A + c V)`` is attained on the inner quarter of the V range."""
    inner = V <= V.max() / 4
    outer = ~inner
    if not inner.any() or not outer.any():
        raise NoValidConstants("grid does not separate inner and outer regions")

    def gap(c):
        return np.max(A[inner] + c * V[inner]) - np.max(A[outer] + c * V[outer])

    if gap(0.0) < 0:
        return None
    hi = 1.0
    while gap(hi) >= 0:
        hi *= 2
        if hi > 1e12:
            return hi
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gap(mid) >= 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * hi:
            break
    return lo


def fit_drift_constants(model: DiffusionModel, spec: LyapunovSpec, grid) -> DriftFit:
    """Fit ``(c1, c1_breve)`` with ``A V <= -c1 V + c1_breve`` on every grid point.

    ``c1`` is the largest rate for which the smallest admissible constant is
    still decided by points in the inner quarter of the sampled ``V`` range,
    so the constant does not grow with the grid radius.  The inequality is
    only certified on the grid; ``radius`` records its extent.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[0] < 2:
        raise BadConfig("grid must contain at least two points")
    V = np.asarray(lyapunov_value(model, spec, grid))
    A = np.asarray(generator_of_V(model, spec, grid))
    radius = float(np.linalg.norm(grid, axis=1).max())
    c1 = _edge_split_c1(V, A)
    if c1 is None or c1 <= 0:
        worst = np.argsort(A)[-5:][::-1]
        viol = [{"y": grid[i].tolist(), "AV": float(A[i]), "V": float(V[i])} for i in worst]
        raise NoValidConstants(f"generator of V grows at the grid edge; examples: {viol}")
    c1_breve = max(0.0, float(np.max(A + c1 * V)))
    slack = A - (-c1 * V + c1_breve)
    tol = 1e-9 * max(1.0, float(np.abs(A).max()))
    viol = [{"y": grid[i].tolist(), "excess": float(slack[i])} for i in np.nonzero(slack > tol)[0]]
    return DriftFit(c1, c1_breve, int(grid.shape[0]), radius, viol, spec.kappa, spec.c_hat2)


def tune_lyapunov(model: DiffusionModel, grid, kappas=None, Q=None) -> tuple[LyapunovSpec, DriftFit]:
    """Solve ``Q``, pick ``kappa`` maximising the fitted ``c1``, and set ``c_hat2`` so ``V >= 0``."""
    Q = solve_Qtilde(model.R, model.p) if Q is None else Q
    kappas = np.logspace(-2, 2, 9) if kappas is None else kappas
    grid = np.atleast_2d(grid)
    best = None
    for kappa in kappas:
        bare = LyapunovSpec(Q, float(kappa), 0.0)
        c_hat2 = max(0.0, -float(np.min(lyapunov_value(model, bare, grid)))) + 1e-6
        spec = bare.with_(c_hat2=c_hat2)
        try:
            fit = fit_drift_constants(model, spec, grid)
        except NoValidConstants:
            continue
        if fit.violations:
            continue
        if best is None or fit.c1 > best[1].c1:
            best = (spec, fit)
    if best is None:
        raise NoValidConstants("no kappa in the search range produced valid drift constants")
    spec, fit = best
    return spec.with_(fitted=(fit.c1, fit.c1_breve)), fit


@dataclass
class BoundFit:
    c_hat1: float
    C_hat1: float
    C_hat2: float
    grad_C: float


def fit_bounds(model: DiffusionModel, spec: LyapunovSpec, grid) -> BoundFit:
    """Quadratic sandwich ``c_hat1|y|^2 <= V <= C_hat1|y|^2 + C_hat2 + c_hat2`` and ``|grad V| <= C(1+|y|)``."""
    grid = np.atleast_2d(grid)
    V = np.asarray(lyapunov_value(model, spec, grid))
    r2 = np.sum(grid**2, axis=1)
    nz = r2 > 0
    ratio = V[nz] / r2[nz]
    c_hat1 = float(ratio.min())
    C_hat1 = float(ratio.max())
    C_hat2 = max(0.0, float(np.max(V - C_hat1 * r2 - spec.c_hat2)))
    G = np.linalg.norm(lyapunov_gradient(model, spec, grid), axis=1)
    grad_C = float(np.max(G / (1 + np.sqrt(r2))))
    return BoundFit(c_hat1, C_hat1, C_hat2, grad_C)


# ---------------------------------------------------------------------------
# Moment-bound audit


@dataclass
class MomentAudit:
    ell: int
    c1: float
    c_breve: float
    times: np.ndarray
    mean_Vl: np.ndarray
    stderr: np.ndarray
    bound: np.ndarray
    max_ratio: float
    violations: list

    def to_dict(self) -> dict:
        return {
            "ell": self.ell,
            "c1": self.c1,
            "c_breve": self.c_breve,
            "max_ratio": self.max_ratio,
            "n_times": int(len(self.times)),
            "violations": self.violations,
        }


def moment_bound_audit(model: DiffusionModel, trajectories, spec: LyapunovSpec, ell: int, c1: float, c_breve: float,
                       n_se: float = 3.0) -> MomentAudit:
    """Compare the empirical ``E V^ell(X_t)`` with ``e^{-c1 t} V^ell(x) + c_breve (1 - e^{-c1 t}) / c1``.

    Trajectories must share ``x0`` and step size and keep every step; time
    zero is the common initial state.  A violation is a time where the mean
    exceeds the bound by more than ``n_se`` standard errors.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise EmptyInput("no trajectories to audit")
    x0 = np.asarray(trajectories[0].x0)
    eta = trajectories[0].eta
    for t in trajectories:
        if not np.array_equal(np.asarray(t.x0), x0) or t.eta != eta:
            raise BadConfig("trajectories must share x0 and eta")
    n_keep = min(len(t.states) for t in trajectories)
    steps = trajectories[0].step_indices[:n_keep]
    vals = np.stack([np.asarray(lyapunov_value(model, spec, t.states[:n_keep])) ** ell for t in trajectories])
    v0 = float(lyapunov_value(model, spec, x0)) ** ell
    times = np.concatenate([[0.0], eta * steps])
    mean = np.concatenate([[v0], vals.mean(axis=0)])
    m = len(trajectories)
    se = np.concatenate([[0.0], vals.std(axis=0, ddof=1) / math.sqrt(m) if m > 1 else np.zeros(n_keep)])
    decay = np.exp(-c1 * times)
    bound = decay * v0 + c_breve * (1 - decay) / c1
    ratio = mean / bound
    viol = [
        {"t": float(times[i]), "mean": float(mean[i]), "bound": float(bound[i])}
        for i in np.nonzero(mean - n_se * se > bound)[0]
    ]
    return MomentAudit(ell, c1, c_breve, times, mean, se, bound, float(ratio.max()), viol)


def audit_report(fit: DriftFit) -> dict:
    """JSON-ready drift audit: ``{c1, c1_breve, grid_size, violations, kappa, c_hat2}``."""
    return {
        "c1": fit.c1,
        "c1_breve": fit.c1_breve,
        "grid_size": fit.grid_size,
        "radius": fit.radius,
        "violations": fit.violations,
        "kappa": fit.kappa,
        "c_hat2": fit.c_hat2,
    }
