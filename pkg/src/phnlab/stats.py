"""Empirical-measure diagnostics.

Wasserstein-1 distances (exact in one dimension, sliced in several), the
closed-form stationary law of the one-phase diffusion, Bartlett long-run
variance, and Monte Carlo harnesses for the CLT and moderate-deviation
behaviour of ergodic averages.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np
from scipy import special, stats as sps

from .em import SampleSet, default_gap, em_blocks, sample_invariant
from .errors import BadAlpha, BadConfig, DimensionMismatch, EmptyInput, SeriesTooShort
from .model import DiffusionModel
from .parallel import pmap
from .seeds import make_rng, seed_derivation

# ---------------------------------------------------------------------------
# Wasserstein-1


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[0] < 1:
            raise EmptyInput("empirical measure needs at least one point")
        object.__setattr__(self, "points", pts)

    def integrate(self, h) -> float:
        return float(np.mean(h(self.points)))


def _as_points(x) -> np.ndarray:
    if isinstance(x, (SampleSet, EmpiricalMeasure)):
        return x.points
    a = np.asarray(x, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def w1_1d(a, b) -> float:
    """W1 between two one-dimensional empirical measures.

    Equal sizes use the order-statistic pairing; unequal sizes integrate
    ``|F_a - F_b|`` exactly over the merged support.
    """
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise EmptyInput("w1_1d needs nonempty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    grid = np.sort(np.concatenate([a, b]))
    widths = np.diff(grid)
    Fa = np.searchsorted(a, grid[:-1], side="right") / a.size
    Fb = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(Fa - Fb) * widths))


def w1_to_distribution(samples, ppf) -> float:
    """W1 between a 1-D sample and a continuous law, pairing order statistics with mid-quantiles."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if x.size == 0:
        raise EmptyInput("no samples")
    q = ppf((np.arange(x.size) + 0.5) / x.size)
    return float(np.mean(np.abs(x - q)))


def sliced_directions(d: int, n_directions: int, seed: int) -> np.ndarray:
    """Unit projection directions: ``e/|e|``, the coordinate axes, then seeded random ones."""
    fixed = [np.ones(d) / math.sqrt(d)]
    if d > 1:
        fixed.extend(np.eye(d))
    dirs = list(fixed)
    n_random = max(n_directions - len(fixed), 0)
    if n_random:
        g = make_rng(seed, "direction", 0).standard_normal((n_random, d))
        dirs.extend(g / np.linalg.norm(g, axis=1, keepdims=True))
    return np.array(dirs)


def w1_sliced(A, B, n_directions: int = 32, seed: int = 0) -> float:
    """Average 1-D W1 over fixed projections ("sliced-W1")."""
    A = _as_points(A)
    B = _as_points(B)
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatch(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    U = sliced_directions(A.shape[1], n_directions, seed)
    return float(np.mean([w1_1d(A @ u, B @ u) for u in U]))


# ---------------------------------------------------------------------------
# Exact stationary law of the one-phase diffusion


@dataclass(frozen=True)
class Exact1DInvariant:
    """Stationary density of ``dX = (-beta - x + (1-alpha) x^+) dt + sqrt(2) dB``.

    Up to normalisation the density is ``exp(-beta x - x^2/2)`` on ``x <= 0``
    and ``exp(-beta x - alpha x^2/2)`` on ``x > 0``.
    """

    alpha: float
    beta: float
    log_Z: float = field(init=False)
    mass_neg: float = field(init=False)

    def __post_init__(self):
        a, b = self.alpha, self.beta
        if not a > 0:
            raise BadAlpha(f"alpha must be positive, got {a}")
        log_zn = b * b / 2 + 0.5 * math.log(2 * math.pi) + float(special.log_ndtr(b))
        log_zp = b * b / (2 * a) + 0.5 * math.log(2 * math.pi / a) + float(special.log_ndtr(-b / math.sqrt(a)))
        log_z = float(np.logaddexp(log_zn, log_zp))
        object.__setattr__(self, "log_Z", log_z)
        object.__setattr__(self, "mass_neg", math.exp(log_zn - log_z))

    @property
    def Z(self) -> float:
        return math.exp(self.log_Z)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        quad = np.where(x > 0, self.alpha, 1.0) * x * x / 2
        return -self.beta * x - quad - self.log_Z

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        a, b = self.alpha, self.beta
        sa = math.sqrt(a)
        neg = self.mass_neg * special.ndtr(np.minimum(x, 0) + b) / special.ndtr(b)
        tail0 = special.ndtr(-b / sa)
        pos = self.mass_neg + (1 - self.mass_neg) * (
            1 - special.ndtr(-(sa * np.maximum(x, 0) + b / sa)) / tail0
        )
        return np.where(x <= 0, neg, pos)

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        a, b = self.alpha, self.beta
        sa = math.sqrt(a)
        w = self.mass_neg
        with np.errstate(divide="ignore", invalid="ignore"):
            neg = special.ndtri(np.clip(u / w, 0, 1) * special.ndtr(b)) - b
            r = np.clip((u - w) / (1 - w), 0, 1)
            pos = (-special.ndtri((1 - r) * special.ndtr(-b / sa)) - b / sa) / sa
        return np.where(u <= w, neg, pos)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.ppf(rng.random(n))

    def mean(self) -> float:
        from scipy.integrate import quad

        lo, hi = self.ppf(1e-14), self.ppf(1 - 1e-14)
        return float(quad(lambda x: x * self.pdf(x), lo, 0)[0] + quad(lambda x: x * self.pdf(x), 0, hi)[0])


def exact_1d_invariant(alpha: float, beta: float) -> Exact1DInvariant:
    return Exact1DInvariant(float(alpha), float(beta))


# ---------------------------------------------------------------------------
# Long-run variance


def autocovariance(y, max_lag: int, block: int = 1 << 16) -> np.ndarray:
    """Biased autocovariances ``gamma_0..gamma_max_lag`` (divisor ``n``).

    Long series are processed in blocks with zero-padded FFT
    cross-correlation, which keeps memory at ``O(block + max_lag)``.
    """
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    y = y - y.mean()
    L = int(max_lag)
    if n * (L + 1) <= 5_000_000:
        acov = np.array([y[: n - i] @ y[i:] for i in range(L + 1)])
        return acov / n
    nfft = 1 << int(math.ceil(math.log2(block + L + 1)))
    acov = np.zeros(L + 1)
    for s in range(0, n, block):
        a = y[s : s + block]
        b = y[s : s + block + L]
        c = np.fft.irfft(np.conj(np.fft.rfft(a, nfft)) * np.fft.rfft(b, nfft), nfft)
        acov += c[: L + 1]
    return acov / n


def long_run_variance(series, max_lag: int | None = None) -> float:
    """Bartlett-window estimate of ``var + 2 sum cov`` for a stationary series.

    The default window is ``floor(n ** (1/3))``.
    """
    y = np.asarray(series, dtype=float).ravel()
    n = y.size
    L = int(math.floor(n ** (1.0 / 3.0) + 1e-9)) if max_lag is None else int(max_lag)
    if L < 0:
        raise BadConfig("max_lag must be nonnegative")
    if n < 3 or n < 4 * (L + 1):
        raise SeriesTooShort(f"series of length {n} is too short for max_lag={L}")
    acov = autocovariance(y, L)
    w = 1.0 - np.arange(1, L + 1) / (L + 1)
    return float(acov[0] + 2.0 * np.sum(w * acov[1:]))


# ---------------------------------------------------------------------------
# Registered bounded test functions


def make_test_function(spec: dict):
    """Build a vectorised bounded test function from ``{"type": ..., **params}``.

    Types: ``indicator_e`` (``1{e'x > c}``), ``indicator_coord``
    (``1{x_i > c}``, ``i`` 1-based), ``tanh`` (``tanh(<a, x> - c)``) and
    ``constant``.
    """
    kind = spec.get("type")
    c = float(spec.get("c", 0.0))
    if kind == "indicator_e":
        return lambda x: (np.asarray(x).sum(axis=-1) > c).astype(float)
    if kind == "indicator_coord":
        i = int(spec["i"]) - 1
        return lambda x: (np.asarray(x)[..., i] > c).astype(float)
    if kind == "tanh":
        a = np.asarray(spec["a"], dtype=float)
        return lambda x: np.tanh(np.asarray(x) @ a - c)
    if kind == "constant":
        value = float(spec.get("value", 1.0))
        return lambda x: np.full(np.asarray(x).shape[:-1], value)
    raise BadConfig(f"unknown test function type {kind!r}")


def h_id(spec: dict) -> str:
    return spec["type"] + "(" + ",".join(f"{k}={v}" for k, v in sorted(spec.items()) if k != "type") + ")"


def _h_series(model, hspec, eta, n_steps, x0, rng, burn_in=0) -> np.ndarray:
    h = make_test_function(hspec)
    out = np.empty(n_steps)
    pos = 0
    for blk in em_blocks(model, eta, burn_in + n_steps, x0, rng):
        vals = h(blk)
        skip = max(burn_in - pos, 0)
        start = pos + skip - burn_in
        take = vals[skip:]
        out[start : start + take.size] = take
        pos += blk.shape[0]
    return out


def _ergodic_average(job, model, hspec, eta, n, x0, burn_in, seed):
    r = job
    rng = make_rng(seed, "replication", r)
    return float(_h_series(model, hspec, eta, n, x0, rng, burn_in).mean())


def _replication_averages(model, hspec, eta, n, replications, seed, x0, burn_in, n_workers, offset=0):
    work = partial(_ergodic_average, model=model, hspec=hspec, eta=eta, n=n, x0=x0, burn_in=burn_in, seed=seed)
    return np.array(pmap(work, range(offset, offset + replications), n_workers))


@dataclass
class Calibration:
    mu_hat: float
    sigma_h2_hat: float
    n_steps: int
    max_lag: int


def calibrate(model, hspec, eta, n_steps, seed, x0=None, burn_in=0, max_lag=None) -> Calibration:
    """Centering mean and long-run variance of ``h`` from one long chain."""
    rng = make_rng(seed, "calibration", 0)
    series = _h_series(model, hspec, eta, n_steps, x0, rng, burn_in)
    lag = int(math.isqrt(n_steps)) if max_lag is None else int(max_lag)
    return Calibration(float(series.mean()), long_run_variance(series, lag), n_steps, lag)


# ---------------------------------------------------------------------------
# CLT


@dataclass
class CLTReport:
    h_id: str
    n: int
    eta: float
    replications: int
    normalized_values: np.ndarray
    sigma_h2_hat: float
    test_statistic: float
    p_value: float
    mu_hat: float = float("nan")
    averages: np.ndarray | None = None
    sigma_h2_replications: float = float("nan")
    calibration_steps: int = 0
    max_lag: int = 0
    burn_in: int = 0
    seed: int = 0
    degenerate: bool = False

    @property
    def mean_of_averages(self) -> float:
        return float(np.mean(self.averages))

    @property
    def variance_gap(self) -> float:
        return self.sigma_h2_replications - self.sigma_h2_hat

    def summary(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("normalized_values", "averages")}
        out["mean_of_averages"] = self.mean_of_averages
        out["variance_gap"] = self.variance_gap
        return out


def clt_experiment(
    model: DiffusionModel,
    h: dict,
    eta: float,
    n: int,
    replications: int,
    seed: int = 0,
    x0=None,
    burn_in: int | None = None,
    calibration_factor: int | None = None,
    max_lag: int | None = None,
    n_workers: int = 1,
) -> CLTReport:
    """Replicate ergodic averages and test their Gaussian fluctuations.

    Each replication averages ``h`` over ``n`` EM steps after ``burn_in``.
    The centering ``mu_hat`` and variance ``sigma_h2_hat`` come from one
    calibration chain of ``calibration_factor * n`` steps (default: as many
    steps as all replications together) with a Bartlett window of
    ``floor(sqrt(length))`` lags.  The normalized values
    ``sqrt(n) (average - mu_hat)`` are KS-tested against ``N(0, sigma_h2_hat)``.
    """
    if replications < 50:
        raise BadConfig("a CLT experiment needs at least 50 replications")
    burn_in = 10 * default_gap(eta) if burn_in is None else int(burn_in)
    factor = max(10, replications) if calibration_factor is None else int(calibration_factor)
    cal = calibrate(model, h, eta, factor * n, seed, x0, burn_in, max_lag)
    avgs = _replication_averages(model, h, eta, n, replications, seed, x0, burn_in, n_workers)
    values = math.sqrt(n) * (avgs - cal.mu_hat)
    degenerate = not cal.sigma_h2_hat > 1e-14 or np.all(values == values[0])
    if degenerate:
        stat, pval = float("nan"), float("nan")
    else:
        res = sps.kstest(values, "norm", args=(0.0, math.sqrt(cal.sigma_h2_hat)))
        stat, pval = float(res.statistic), float(res.pvalue)
    return CLTReport(
        h_id=h_id(h),
        n=n,
        eta=eta,
        replications=replications,
        normalized_values=values,
        sigma_h2_hat=cal.sigma_h2_hat,
        test_statistic=stat,
        p_value=pval,
        mu_hat=cal.mu_hat,
        averages=avgs,
        sigma_h2_replications=float(np.var(values, ddof=1)),
        calibration_steps=cal.n_steps,
        max_lag=cal.max_lag,
        burn_in=burn_in,
        seed=seed,
        degenerate=bool(degenerate),
    )


# ---------------------------------------------------------------------------
# Moderate deviations


@dataclass
class MDPRow:
    n: int
    a_n: float
    z: float
    hits: int
    p_hat: float
    log_rate: float
    theory_rate: float
    ratio: float
    zero_hits: bool
    oracle_rate: float = float("nan")


@dataclass
class MDPReport:
    h_id: str
    eta: float
    a_exponent: float
    replications: int
    sigma_h2_hat: float
    mu_hat: float
    rows: list = field(default_factory=list)
    method: str = "crude"

    @property
    def zero_hits(self) -> list:
        return [(r.n, r.z) for r in self.rows if r.zero_hits]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["zero_hits"] = self.zero_hits
        return d


def _mdp_row(n, a_n, z, hits, p_hat, sigma2, oracle_rate=float("nan")) -> MDPRow:
    zero = p_hat <= 0
    log_rate = math.log(p_hat) / a_n**2 if not zero else float("-inf")
    theory = -z * z / (2 * sigma2)
    ratio = log_rate / theory if theory != 0 and not zero else float("nan")
    return MDPRow(n, a_n, z, int(hits), float(p_hat), log_rate, theory, ratio, bool(zero), oracle_rate)


def _check_mdp_args(n_list, a_exponent, thresholds, replications):
    if not 0 < a_exponent < 0.5:
        raise BadConfig("a_exponent must lie in (0, 1/2)")
    if any(z < 0 for z in thresholds):
        raise BadConfig("thresholds must be nonnegative")
    if replications < 1 or not n_list:
        raise BadConfig("need replications >= 1 and a nonempty n_list")


def mdp_rate_check(
    model: DiffusionModel,
    h: dict,
    eta: float,
    n_list,
    a_exponent: float,
    thresholds,
    replications: int,
    seed: int = 0,
    x0=None,
    burn_in: int | None = None,
    calibration_factor: int = 10,
    n_workers: int = 1,
) -> MDPReport:
    """Crude Monte Carlo check of the moderate-deviation rate of EM ergodic averages.

    For each ``n`` the exceedance probability of
    ``sqrt(n)/a_n (average - mu_hat) >= z`` is estimated from
    ``replications`` chains and ``log(p)/a_n^2`` is set against
    ``-z^2 / (2 sigma_h2_hat)``.  Cells without exceedances are marked
    ``zero_hits`` instead of raising.
    """
    _check_mdp_args(n_list, a_exponent, thresholds, replications)
    burn_in = 10 * default_gap(eta) if burn_in is None else int(burn_in)
    n_cal = calibration_factor * max(n_list)
    cal = calibrate(model, h, eta, n_cal, seed, x0, burn_in)
    report = MDPReport(h_id(h), eta, a_exponent, replications, cal.sigma_h2_hat, cal.mu_hat)
    for k, n in enumerate(n_list):
        avgs = _replication_averages(
            model, h, eta, n, replications, seed, x0, burn_in, n_workers, offset=k * replications
        )
        a_n = float(n) ** a_exponent
        scaled = math.sqrt(n) / a_n * (avgs - cal.mu_hat)
        for z in thresholds:
            hits = int(np.sum(scaled >= z))
            report.rows.append(_mdp_row(n, a_n, z, hits, hits / replications, cal.sigma_h2_hat))
    return report


def _surrogate_chunk(job, n, theta, seed):
    r0, r1 = job
    sums = np.empty(r1 - r0)
    for j, r in enumerate(range(r0, r1)):
        rng = make_rng(seed, "replication", r)
        sums[j] = np.sum(rng.standard_normal(n) + theta)
    return sums


def mdp_gaussian_surrogate(
    n_list,
    a_exponent: float,
    thresholds,
    replications: int,
    seed: int = 0,
    calibration_length: int = 1_000_000,
    n_workers: int = 1,
) -> MDPReport:
    """Moderate-deviation rate for an iid standard Gaussian series.

    Exceedance probabilities at MDP scale are far below ``1/replications``,
    so each series is drawn with its mean tilted to the threshold and
    reweighted by the Gaussian likelihood ratio.  The variance used for
    the theoretical rate is the Bartlett long-run variance of a separate
    calibration series; the exact tail ``log(Phi_bar(a_n z))/a_n^2`` is
    reported next to it.
    """
    _check_mdp_args(n_list, a_exponent, thresholds, replications)
    cal_series = make_rng(seed, "calibration", 0).standard_normal(calibration_length)
    mu_hat = float(cal_series.mean())
    sigma2 = long_run_variance(cal_series)
    report = MDPReport("iid_gaussian", 1.0, a_exponent, replications, sigma2, mu_hat, method="importance")
    chunk = max(1, replications // max(n_workers, 1))
    jobs = [(r, min(r + chunk, replications)) for r in range(0, replications, chunk)]
    cell = 0
    for n in n_list:
        a_n = float(n) ** a_exponent
        for z in thresholds:
            # exceedance event: sum >= n (mu_hat + z a_n / sqrt(n))
            level = n * (mu_hat + z * a_n / math.sqrt(n))
            theta = level / n
            work = partial(_surrogate_chunk, n=n, theta=theta, seed=seed_derivation(seed, "replication", cell))
            sums = np.concatenate(pmap(work, jobs, n_workers))
            log_w = -theta * sums + n * theta * theta / 2
            hit = sums >= level
            hits = int(hit.sum())
            if hits:
                log_p = float(special.logsumexp(log_w[hit]) - math.log(replications))
                p_hat = math.exp(log_p) if log_p > -700 else 0.0
            else:
                log_p, p_hat = float("-inf"), 0.0
            oracle = float(special.log_ndtr(-a_n * z)) / a_n**2
            row = _mdp_row(n, a_n, z, hits, max(p_hat, 0.0), sigma2, oracle)
            if hits:
                # keep precision for probabilities below double range
                row.log_rate = log_p / a_n**2
                row.zero_hits = False
                row.ratio = row.log_rate / row.theory_rate if row.theory_rate != 0 else float("nan")
                row.p_hat = p_hat
            report.rows.append(row)
            cell += 1
    return report


# ---------------------------------------------------------------------------
# W1 convergence in the step size


@dataclass
class SweepRow:
    eta: float
    w1: float
    envelope: float


@dataclass
class SweepTable:
    rows: list
    slope: float
    C: float
    distance: str

    @property
    def non_increasing(self) -> bool:
        ordered = sorted(self.rows, key=lambda r: r.eta)
        return all(a.w1 <= b.w1 for a, b in zip(ordered, ordered[1:]))

    def within_envelope(self, factor: float = 1.5) -> bool:
        return all(r.w1 <= factor * r.envelope for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "slope": self.slope,
            "C": self.C,
            "distance": self.distance,
            "non_increasing": self.non_increasing,
            "within_1.5_envelope": self.within_envelope(1.5),
        }


def w1_convergence_sweep(
    model: DiffusionModel,
    eta_list,
    sampler_config: dict,
    oracle,
    n_workers: int = 1,
) -> SweepTable:
    """W1 between EM invariant samples and a reference law across step sizes.

    ``oracle`` is an :class:`Exact1DInvariant` (one-phase models) or a
    reference :class:`SampleSet`.  The slope is the least-squares fit of
    ``log W1`` on ``log eta``; the envelope is ``C sqrt(eta)`` with ``C``
    fixed at the largest step size.
    """
    eta_list = [float(e) for e in eta_list]
    if len(eta_list) < 3:
        raise BadConfig("need at least three step sizes")
    cfg = dict(sampler_config)
    rows = []
    for eta in eta_list:
        s = sample_invariant(
            model,
            eta,
            int(cfg.get("n_samples", 100_000)),
            gap=cfg.get("gap"),
            burn_in=int(cfg.get("burn_in", 10_000)),
            seed=int(cfg.get("seed", 0)),
            n_chains=int(cfg.get("n_chains", 1)),
            x0=cfg.get("x0"),
            n_workers=n_workers,
        )
        if isinstance(oracle, Exact1DInvariant):
            if model.d != 1:
                raise DimensionMismatch("the exact oracle is one-dimensional")
            w1 = w1_to_distribution(s.points[:, 0], oracle.ppf)
            distance = "W1"
        else:
            ref = _as_points(oracle)
            if model.d == 1:
                w1, distance = w1_1d(s.points[:, 0], ref[:, 0]), "W1"
            else:
                w1 = w1_sliced(s.points, ref, int(cfg.get("n_directions", 32)), int(cfg.get("seed", 0)))
                distance = "sliced-W1"
        rows.append([eta, w1])
    etas = np.array([r[0] for r in rows])
    w1s = np.array([r[1] for r in rows])
    # a zero distance (self-comparison) has no log-log slope
    slope = float(np.polyfit(np.log(etas), np.log(w1s), 1)[0]) if np.all(w1s > 0) else float("nan")
    i_max = int(np.argmax(etas))
    C = float(w1s[i_max] / math.sqrt(etas[i_max]))
    table = [SweepRow(e, w, C * math.sqrt(e)) for e, w in rows]
    return SweepTable(table, slope, C, distance)
