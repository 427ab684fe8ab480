"""Event-driven simulation of the M/Ph/n+M queue in the Halfin-Whitt regime.

State bookkeeping: ``X[k]`` counts customers in service in phase ``k`` plus
waiting customers whose initial phase (drawn at arrival) is ``k``.  Waiting
customers are served FCFS and each abandons at rate ``alpha``.  Arrivals
are Poisson with rate ``lambda_n = n - beta sqrt(n)``.

Every event consumes exactly three uniforms ``(u_time, u_event, u_detail)``
from a PCG64 generator, drawn in blocks of shape ``(events, 3)``.  The
compiled kernel and the pure-Python :class:`QueueState` stepper consume the
stream identically and produce the same path.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numba
import numpy as np
from scipy import stats as sps

from .em import SampleSet
from .errors import BadConfig, DimensionMismatch, NonFinite, ParameterMismatch
from .model import DiffusionModel, PhaseTypeService
from .seeds import make_rng
from .stats import Exact1DInvariant, w1_sliced, w1_to_distribution

EVENT_NAMES = ("arrival", "completion", "abandonment", "routing")
ARRIVAL, DEPARTURE, ABANDON, ROUTE = 0, 1, 2, 3
BLOCK_EVENTS = 1 << 16


@dataclass(frozen=True, eq=False)
class QueueConfig:
    n: int
    pt: PhaseTypeService
    alpha: float
    beta: float
    horizon: float
    burn_in: float = 50.0
    spacing: float = 1.0
    seed: int = 0
    lambda_n: float | None = None

    def __post_init__(self):
        if self.n < 1:
            raise BadConfig("server count must be >= 1")
        if not self.pt.is_normalized:
            raise BadConfig("queue service distribution must have mean 1")
        if not self.alpha > 0:
            raise BadConfig("alpha must be positive")
        lam = self.n - self.beta * math.sqrt(self.n) if self.lambda_n is None else float(self.lambda_n)
        if lam < 0 or (self.lambda_n is None and lam <= 0):
            raise BadConfig(f"arrival rate n - beta sqrt(n) = {lam} must be positive")
        object.__setattr__(self, "lambda_n", lam)
        if self.horizon < self.burn_in or self.spacing <= 0:
            raise BadConfig("need horizon >= burn_in and spacing > 0")

    @property
    def d(self) -> int:
        return self.pt.d

    @property
    def n_grid(self) -> int:
        return int(math.floor((self.horizon - self.burn_in) / self.spacing + 1e-9))

    def matches(self, model_dict: dict, tol: float = 1e-12) -> bool:
        mine = {**self.pt.to_dict(), "alpha": self.alpha, "beta": self.beta}
        for key, val in mine.items():
            other = model_dict.get(key)
            if other is None or np.shape(other) != np.shape(val):
                return False
            if not np.allclose(np.asarray(other, dtype=float), np.asarray(val, dtype=float), atol=tol, rtol=0):
                return False
        return True

    @classmethod
    def for_model(cls, model: DiffusionModel, n: int, horizon: float, **kw) -> "QueueConfig":
        return cls(n=n, pt=model.pt, alpha=model.alpha, beta=model.beta, horizon=horizon, **kw)


@dataclass
class QueuePath:
    """Per-phase counts on the grid ``burn_in + k * spacing``, plus event counters."""

    states: np.ndarray
    times: np.ndarray
    arrivals: int
    departures: int
    abandonments: int
    routings: int
    events: int
    final_X: np.ndarray
    final_in_service: int
    max_in_service: int
    min_X: int
    seed: int

    @property
    def in_system(self) -> int:
        return int(self.final_X.sum())


class QueueState:
    """Reference pure-Python state machine; one :meth:`step` per event."""

    def __init__(self, config: QueueConfig):
        self.config = config
        d = config.d
        self.S = np.zeros(d, dtype=np.int64)
        self.W = np.zeros(d, dtype=np.int64)
        self.waiting: list[int] = []
        self.t = 0.0
        self.counts = dict(arrivals=0, departures=0, abandonments=0, routings=0, events=0)
        self._p_cum = np.cumsum(config.pt.p)
        self._P_cum = np.cumsum(config.pt.P, axis=1)

    @property
    def X(self) -> np.ndarray:
        return self.S + self.W

    @property
    def busy(self) -> int:
        return int(self.S.sum())

    def total_rate(self) -> float:
        cfg = self.config
        acc = cfg.lambda_n
        for k in range(cfg.d):
            acc += int(self.S[k]) * float(cfg.pt.v[k])
        return acc + len(self.waiting) * cfg.alpha

    def holding_time(self, u_time: float) -> float:
        total = self.total_rate()
        return math.inf if total <= 0 else -math.log1p(-u_time) / total

    def step(self, u_time: float, u_event: float, u_detail: float):
        """Advance one event; returns ``(dt, event_code, phase)``."""
        cfg = self.config
        d = cfg.d
        v = cfg.pt.v
        acc = cfg.lambda_n
        last = -1
        for k in range(d):
            acc += int(self.S[k]) * float(v[k])
            if self.S[k] > 0:
                last = k
        q = len(self.waiting)
        total = acc + q * cfg.alpha
        if total <= 0:
            return math.inf, -1, -1
        dt = -math.log1p(-u_time) / total
        self.t += dt
        self.counts["events"] += 1
        target = u_event * total
        acc = cfg.lambda_n
        if target < acc:
            j = _pick(self._p_cum, u_detail, d)
            self.counts["arrivals"] += 1
            if self.busy < cfg.n:
                self.S[j] += 1
            else:
                self.waiting.append(j)
                self.W[j] += 1
            return dt, ARRIVAL, j
        for k in range(d):
            acc += int(self.S[k]) * float(v[k])
            if self.S[k] > 0 and (target < acc or (q == 0 and k == last)):
                row = self._P_cum[k]
                if u_detail < row[-1]:
                    j = _pick(row, u_detail, d)
                    self.S[k] -= 1
                    self.S[j] += 1
                    self.counts["routings"] += 1
                    return dt, ROUTE, j
                self.S[k] -= 1
                self.counts["departures"] += 1
                if self.waiting:
                    j0 = self.waiting.pop(0)
                    self.W[j0] -= 1
                    self.S[j0] += 1
                return dt, DEPARTURE, k
        idx = min(int(u_detail * q), q - 1)
        j = self.waiting.pop(idx)
        self.W[j] -= 1
        self.counts["abandonments"] += 1
        return dt, ABANDON, j


def _pick(cum, u, d):
    for j in range(d):
        if u < cum[j]:
            return j
    return d - 1


@numba.njit(cache=True)
def _pick_nb(cum, u, d):
    for j in range(d):
        if u < cum[j]:
            return j
    return d - 1


@numba.njit(cache=True)
def _queue_kernel(S, W, buf, state, U, lam, v, p_cum, P_cum, alpha, n_srv, grid, rec, counters):
    # state: [t, next_grid, spacing, head, qlen, n_rec, n_grid]
    d = S.shape[0]
    t = state[0]
    next_grid = state[1]
    spacing = state[2]
    head = int(state[3])
    qlen = int(state[4])
    n_rec = int(state[5])
    n_grid = int(state[6])
    cap = buf.shape[0]
    k = 0
    status = 0
    while k < U.shape[0]:
        if n_rec >= n_grid:
            status = 1
            break
        if head + qlen >= cap:
            if head > 0:
                for i in range(qlen):
                    buf[i] = buf[head + i]
                head = 0
            else:
                status = 2
                break
        busy = 0
        acc = lam
        last = -1
        for i in range(d):
            busy += S[i]
            acc += S[i] * v[i]
            if S[i] > 0:
                last = i
        total = acc + qlen * alpha
        if total <= 0.0:
            while n_rec < n_grid:
                for i in range(d):
                    rec[n_rec, i] = S[i] + W[i]
                n_rec += 1
            status = 1
            break
        dt = -math.log1p(-U[k, 0]) / total
        if not (dt < 1e300):
            status = 3
            break
        t_next = t + dt
        while n_rec < n_grid and next_grid < t_next:
            for i in range(d):
                rec[n_rec, i] = S[i] + W[i]
            n_rec += 1
            next_grid = grid + n_rec * spacing
        t = t_next
        counters[4] += 1
        target = U[k, 1] * total
        u2 = U[k, 2]
        acc = lam
        done = False
        if target < acc:
            j = _pick_nb(p_cum, u2, d)
            counters[0] += 1
            if busy < n_srv:
                S[j] += 1
            else:
                buf[head + qlen] = j
                qlen += 1
                W[j] += 1
            done = True
        if not done:
            for kk in range(d):
                acc += S[kk] * v[kk]
                if S[kk] > 0 and (target < acc or (qlen == 0 and kk == last)):
                    if u2 < P_cum[kk, d - 1]:
                        j = _pick_nb(P_cum[kk], u2, d)
                        S[kk] -= 1
                        S[j] += 1
                        counters[3] += 1
                    else:
                        S[kk] -= 1
                        counters[1] += 1
                        if qlen > 0:
                            j0 = buf[head]
                            head += 1
                            qlen -= 1
                            W[j0] -= 1
                            S[j0] += 1
                    done = True
                    break
        if not done:
            idx = int(u2 * qlen)
            if idx > qlen - 1:
                idx = qlen - 1
            j = buf[head + idx]
            for i in range(head + idx, head + qlen - 1):
                buf[i] = buf[i + 1]
            qlen -= 1
            W[j] -= 1
            counters[2] += 1
        busy = 0
        for i in range(d):
            busy += S[i]
            if S[i] < 0 or W[i] < 0:
                status = 4
        if busy > counters[5]:
            counters[5] = busy
        if busy > n_srv:
            status = 4
        if status == 4:
            break
        k += 1
    state[0] = t
    state[1] = next_grid
    state[3] = head
    state[4] = qlen
    state[5] = n_rec
    return k, status


def simulate_queue(config: QueueConfig, event_log=None) -> QueuePath:
    """Simulate from an empty system and record ``X`` on the grid after ``burn_in``.

    ``event_log`` (a path) switches to the Python stepper and writes one CSV
    row per event: ``time, event_type, phase, total_in_system``.
    """
    if event_log is not None:
        return _simulate_python(config, event_log)
    d = config.d
    rng = make_rng(config.seed, "replication", 0)
    S = np.zeros(d, dtype=np.int64)
    W = np.zeros(d, dtype=np.int64)
    buf = np.zeros(max(64, 4 * int(math.sqrt(config.n)) + 16), dtype=np.int64)
    n_grid = config.n_grid
    rec = np.zeros((n_grid, d), dtype=np.int64)
    state = np.array([0.0, config.burn_in, config.spacing, 0, 0, 0, n_grid], dtype=float)
    counters = np.zeros(6, dtype=np.int64)
    p_cum = np.cumsum(config.pt.p)
    P_cum = np.ascontiguousarray(np.cumsum(config.pt.P, axis=1))
    v = np.asarray(config.pt.v, dtype=float)
    pending = np.empty((0, 3))
    while True:
        if pending.shape[0] == 0:
            pending = rng.random((BLOCK_EVENTS, 3))
        used, status = _queue_kernel(S, W, buf, state, pending, config.lambda_n, v, p_cum, P_cum,
                                     config.alpha, config.n, config.burn_in, rec, counters)
        pending = pending[used:]
        if status == 1:
            break
        if status == 2:
            buf = np.concatenate([buf, np.zeros_like(buf)])
        elif status == 3:
            raise NonFinite("non-finite event time")
        elif status == 4:
            raise NonFinite("queue state left its admissible region")
    X = S + W
    times = config.burn_in + config.spacing * np.arange(n_grid)
    return QueuePath(
        states=rec,
        times=times,
        arrivals=int(counters[0]),
        departures=int(counters[1]),
        abandonments=int(counters[2]),
        routings=int(counters[3]),
        events=int(counters[4]),
        final_X=X,
        final_in_service=int(S.sum()),
        max_in_service=int(counters[5]),
        min_X=int(rec.min()) if rec.size else 0,
        seed=config.seed,
    )


def _simulate_python(config: QueueConfig, event_log) -> QueuePath:
    rng = make_rng(config.seed, "replication", 0)
    q = QueueState(config)
    n_grid = config.n_grid
    rec = np.zeros((n_grid, config.d), dtype=np.int64)
    n_rec = 0
    max_busy = 0
    min_x = 0
    pending = np.empty((0, 3))
    fh = open(event_log, "w", newline="") if event_log else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(["time", "event_type", "phase", "total_in_system"])
    try:
        while n_rec < n_grid:
            if pending.shape[0] == 0:
                pending = rng.random((BLOCK_EVENTS, 3))
            u = pending[0]
            pending = pending[1:]
            X_before = q.X.copy()
            t0 = q.t
            dt, code, phase = q.step(*u)
            t1 = t0 + dt
            while n_rec < n_grid and config.burn_in + n_rec * config.spacing < t1:
                rec[n_rec] = X_before
                n_rec += 1
            if code < 0:
                break
            max_busy = max(max_busy, q.busy)
            min_x = min(min_x, int(q.X.min()))
            if writer:
                writer.writerow([repr(q.t), EVENT_NAMES[code], phase + 1, int(q.X.sum())])
    finally:
        if fh:
            fh.close()
    c = q.counts
    return QueuePath(rec, config.burn_in + config.spacing * np.arange(n_grid), c["arrivals"], c["departures"],
                     c["abandonments"], c["routings"], c["events"], q.X.copy(), q.busy, max_busy,
                     int(min(min_x, rec.min() if rec.size else 0)), config.seed)


# ---------------------------------------------------------------------------
# Diffusion scaling and comparison


def diffusion_scale(path, n: int, gamma, provenance: dict | None = None) -> SampleSet:
    """Pointwise ``(X - n gamma) / sqrt(n)``."""
    X = path.states if isinstance(path, QueuePath) else np.asarray(path)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    gamma = np.asarray(gamma, dtype=float)
    if X.shape[-1] != gamma.shape[0]:
        raise DimensionMismatch(f"state dimension {X.shape[-1]} vs gamma length {gamma.shape[0]}")
    pts = (X - n * gamma) / math.sqrt(n)
    return SampleSet(points=pts, provenance=dict(provenance or {}, n=n, scaling="(X - n gamma)/sqrt(n)"))


def diffusion_unscale(points, n: int, gamma) -> np.ndarray:
    return math.sqrt(n) * np.asarray(points, dtype=float) + n * np.asarray(gamma, dtype=float)


@dataclass
class CompareReport:
    n: int
    n_samples: int
    w1_em: float | None
    w1_oracle: float | None
    distance: str
    scaled_mean: list
    lambda_n: float
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def steady_state_compare(
    config: QueueConfig,
    em_samples: SampleSet | None = None,
    oracle: Exact1DInvariant | None = None,
    n_directions: int = 32,
    direction_seed: int = 0,
    gamma=None,
) -> CompareReport:
    """Distance between the scaled queue's steady state and EM samples and/or the exact law."""
    if em_samples is not None:
        model_dict = em_samples.provenance.get("model")
        if model_dict is None or not config.matches(model_dict):
            raise ParameterMismatch("EM samples were generated for different model parameters")
        if em_samples.d != config.d:
            raise ParameterMismatch("dimension mismatch between EM samples and queue")
    if oracle is not None:
        if config.d != 1:
            raise ParameterMismatch("the exact oracle applies to one-phase service only")
        if abs(oracle.alpha - config.alpha) > 1e-12 or abs(oracle.beta - config.beta) > 1e-12:
            raise ParameterMismatch("oracle parameters differ from the queue configuration")
    gamma = config.pt.Rinv_p / config.pt.mean if gamma is None else np.asarray(gamma)
    path = simulate_queue(config)
    scaled = diffusion_scale(path, config.n, gamma, {"seed": config.seed})
    w_em = None
    if em_samples is not None:
        w_em = w1_sliced(scaled.points, em_samples.points, n_directions, direction_seed)
    w_or = None
    if oracle is not None:
        w_or = w1_to_distribution(scaled.points[:, 0], oracle.ppf)
    return CompareReport(
        n=config.n,
        n_samples=len(scaled),
        w1_em=w_em,
        w1_oracle=w_or,
        distance="W1" if config.d == 1 else "sliced-W1",
        scaled_mean=scaled.points.mean(axis=0).tolist(),
        lambda_n=float(config.lambda_n),
        seed=config.seed,
    )


# ---------------------------------------------------------------------------
# One-phase birth-death oracle


def birth_death_stationary(n: int, lam: float, mu: float, alpha: float, tol: float = 1e-15) -> np.ndarray:
    """Stationary law of the M/M/n+M count: birth ``lam``, death ``min(k,n) mu + (k-n)^+ alpha``."""
    probs = [1.0]
    k = 0
    while True:
        k += 1
        death = min(k, n) * mu + max(k - n, 0) * alpha
        probs.append(probs[-1] * lam / death)
        if k > n and probs[-1] < tol * max(probs):
            break
    p = np.array(probs)
    return p / p.sum()


@dataclass
class ChiSquareReport:
    statistic: float
    p_value: float
    dof: int
    n_samples: int
    events: int
    spacing: float


def birth_death_chi2(config: QueueConfig, spacing: float = 5.0, min_expected: float = 5.0) -> ChiSquareReport:
    """Chi-square test of one-phase grid samples against the product-form law.

    Grid samples are taken ``spacing`` time units apart so successive
    counts are close to independent.
    """
    if config.d != 1:
        raise BadConfig("the birth-death oracle needs one-phase service")
    cfg = QueueConfig(config.n, config.pt, config.alpha, config.beta, config.horizon, config.burn_in,
                      spacing, config.seed, config.lambda_n)
    path = simulate_queue(cfg)
    x = path.states[:, 0]
    pi = birth_death_stationary(cfg.n, cfg.lambda_n, float(cfg.pt.v[0]), cfg.alpha)
    N = len(x)
    kmax = max(len(pi), int(x.max()) + 1)
    obs = np.bincount(x, minlength=kmax).astype(float)
    exp = np.zeros(kmax)
    exp[: len(pi)] = pi[:kmax] * N
    # merge sparse cells from both tails
    bins_o, bins_e, acc_o, acc_e = [], [], 0.0, 0.0
    for o, e in zip(obs, exp):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            bins_o.append(acc_o)
            bins_e.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 or acc_o > 0:
        bins_o[-1] += acc_o
        bins_e[-1] += acc_e
    bins_o = np.array(bins_o)
    bins_e = np.array(bins_e)
    bins_e *= bins_o.sum() / bins_e.sum()
    res = sps.chisquare(bins_o, bins_e)
    return ChiSquareReport(float(res.statistic), float(res.pvalue), len(bins_o) - 1, N, path.events, spacing)
