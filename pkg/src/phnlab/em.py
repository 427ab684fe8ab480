"""Euler-Maruyama chain for the piecewise-linear diffusion.

One step is ``x' = x + g(x) eta + sqrt(eta) sigma xi`` with ``xi`` a standard
normal vector.  Normals are drawn from a PCG64 generator in blocks of shape
``(steps, d)``, so each step consumes ``d`` draws in coordinate order; the
block size does not change the stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial

import numba
import numpy as np

from .errors import BadConfig, BadDelta, DimensionMismatch, EmptyInput, NonFinite
from .model import DiffusionModel, drift
from .parallel import pmap
from .seeds import GENERATOR_NAME, make_rng, seed_derivation

OVERFLOW_NORM = 1e8
BLOCK_STEPS = 1 << 17


@dataclass(frozen=True)
class EMConfig:
    eta: float
    n_steps: int
    burn_in: int = 0
    thin: int = 1
    x0: tuple | None = None
    seed: int = 0
    n_chains: int = 1

    def __post_init__(self):
        if not 0 < self.eta < math.exp(-1):
            raise BadConfig(f"step size must lie in (0, 1/e), got {self.eta}")
        if self.n_steps < 0 or self.burn_in < 0:
            raise BadConfig("n_steps and burn_in must be nonnegative")
        if self.burn_in > self.n_steps:
            raise BadConfig(f"burn_in={self.burn_in} exceeds n_steps={self.n_steps}")
        if self.thin < 1:
            raise BadConfig("thin must be >= 1")
        if self.n_chains < 1:
            raise BadConfig("n_chains must be >= 1")

    @property
    def n_kept(self) -> int:
        return (self.n_steps - self.burn_in) // self.thin


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Kept states of one chain; row ``j`` is the state after step ``burn_in + (j+1) thin``."""

    states: np.ndarray
    eta: float
    x0: np.ndarray
    seed: int
    chain_id: int = 0
    burn_in: int = 0
    thin: int = 1

    @property
    def step_indices(self) -> np.ndarray:
        return self.burn_in + self.thin * np.arange(1, len(self.states) + 1)

    @property
    def times(self) -> np.ndarray:
        return self.eta * self.step_indices


@dataclass(frozen=True, eq=False)
class SampleSet:
    points: np.ndarray
    provenance: dict = field(default_factory=dict)
    chain_ids: np.ndarray | None = None
    step_indices: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[0] < 1:
            raise EmptyInput("a sample set needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise NonFinite("sample set contains non-finite entries")
        object.__setattr__(self, "points", pts)

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]


@numba.njit(cache=True)
def _em_kernel(x, R, b, q, sL, eta, Z, step0, burn_in, thin, out, n_out, limit_sq):
    d = x.shape[0]
    g = np.empty(d)
    for k in range(Z.shape[0]):
        s = 0.0
        for i in range(d):
            s += x[i]
        sp = s if s > 0.0 else 0.0
        for i in range(d):
            acc = b[i] + sp * q[i]
            for j in range(d):
                acc -= R[i, j] * x[j]
            g[i] = acc
        nrm = 0.0
        for i in range(d):
            noise = 0.0
            for j in range(i + 1):
                noise += sL[i, j] * Z[k, j]
            x[i] = x[i] + eta * g[i] + noise
            nrm += x[i] * x[i]
        step = step0 + k + 1
        if not nrm <= limit_sq:
            return n_out, step
        if step > burn_in and (step - burn_in) % thin == 0:
            for i in range(d):
                out[n_out, i] = x[i]
            n_out += 1
    return n_out, -1


def _kernel_args(model: DiffusionModel, eta: float):
    return (
        np.ascontiguousarray(model.R),
        -model.beta * np.asarray(model.p),
        np.ascontiguousarray(model.kink_vector),
        math.sqrt(eta) * np.ascontiguousarray(model.sigma),
    )


def _initial_state(model: DiffusionModel, x0) -> np.ndarray:
    x = np.zeros(model.d) if x0 is None else np.array(x0, dtype=float).reshape(-1)
    if x.shape != (model.d,):
        raise DimensionMismatch(f"x0 has shape {x.shape}, model dimension is {model.d}")
    return x


def run_em(model, eta, n_steps, x0, rng, burn_in=0, thin=1, block=BLOCK_STEPS) -> np.ndarray:
    """Run ``n_steps`` EM steps and return the kept states as an array."""
    x = _initial_state(model, x0)
    n_kept = max(n_steps - burn_in, 0) // thin
    out = np.empty((n_kept, model.d))
    R, b, q, sL = _kernel_args(model, eta)
    done = n_out = 0
    while done < n_steps:
        m = min(block, n_steps - done)
        Z = rng.standard_normal((m, model.d))
        n_out, bad = _em_kernel(x, R, b, q, sL, eta, Z, done, burn_in, thin, out, n_out, OVERFLOW_NORM**2)
        if bad >= 0:
            raise NonFinite(f"EM chain left the ball |x| <= {OVERFLOW_NORM:g} at step {bad}", step=int(bad))
        done += m
    return out


def em_blocks(model, eta, n_steps, x0, rng, block=BLOCK_STEPS):
    """Yield every state (after each step) of an EM chain in consecutive blocks."""
    x = _initial_state(model, x0)
    R, b, q, sL = _kernel_args(model, eta)
    done = 0
    while done < n_steps:
        m = min(block, n_steps - done)
        Z = rng.standard_normal((m, model.d))
        out = np.empty((m, model.d))
        _, bad = _em_kernel(x, R, b, q, sL, eta, Z, done, done, 1, out, 0, OVERFLOW_NORM**2)
        if bad >= 0:
            raise NonFinite(f"EM chain left the ball |x| <= {OVERFLOW_NORM:g} at step {bad}", step=int(bad))
        done += m
        yield out


def em_step(model: DiffusionModel, x, eta: float, xi) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = x + drift(model, x) * eta + math.sqrt(eta) * (np.asarray(xi, dtype=float) @ model.sigma.T)
    if not np.all(np.isfinite(out)):
        raise NonFinite("EM step produced a non-finite state")
    return out


def simulate_chain(model: DiffusionModel, config: EMConfig, chain_id: int = 0) -> Trajectory:
    """Run one chain; its generator is seeded from ``(config.seed, "chain", chain_id)``."""
    rng = make_rng(config.seed, "chain", chain_id)
    x0 = _initial_state(model, config.x0)
    states = run_em(model, config.eta, config.n_steps, x0, rng, config.burn_in, config.thin)
    states.setflags(write=False)
    return Trajectory(
        states=states,
        eta=config.eta,
        x0=x0,
        seed=config.seed,
        chain_id=chain_id,
        burn_in=config.burn_in,
        thin=config.thin,
    )


def plan_steps(delta: float, K: float = 1.0) -> tuple[float, int]:
    """Step size and iteration count for a target accuracy ``delta``.

    ``eta = delta**2`` and ``N = ceil(K delta**-2 log(1/delta))``.  ``K`` stands
    in for unknown ergodicity constants and is a heuristic knob.
    """
    if not 0 < delta < 1:
        raise BadDelta(f"delta must lie in (0, 1), got {delta}")
    if not K > 0:
        raise BadDelta(f"K must be positive, got {K}")
    eta = delta * delta
    n = math.ceil(K * math.log(1.0 / delta) / eta)
    return eta, max(n, 1)


def default_gap(eta: float) -> int:
    return math.ceil(1.0 / eta - 1e-9)


def _chain_samples(job, model, eta, gap, burn_in, seed, x0):
    chain_id, count = job
    cfg = EMConfig(eta=eta, n_steps=burn_in + count * gap, burn_in=burn_in, thin=gap, x0=x0, seed=seed)
    return simulate_chain(model, cfg, chain_id)


def sample_invariant(
    model: DiffusionModel,
    eta: float,
    n_samples: int,
    gap: int | None = None,
    burn_in: int = 10_000,
    seed: int = 0,
    n_chains: int = 1,
    x0=None,
    n_workers: int = 1,
) -> SampleSet:
    """Draw approximately stationary points of the EM chain.

    Samples are split over ``n_chains`` independent chains (earlier chains
    take the remainder), each separated by ``gap`` steps after ``burn_in``.
    The pooled set is ordered by chain id, so the worker count never changes
    the result.
    """
    if n_samples < 1:
        raise EmptyInput("n_samples must be >= 1")
    gap = default_gap(eta) if gap is None else int(gap)
    x0 = None if x0 is None else tuple(np.asarray(x0, dtype=float).reshape(-1))
    EMConfig(eta=eta, n_steps=burn_in + gap, burn_in=burn_in, thin=gap, seed=seed, n_chains=n_chains)
    base, extra = divmod(n_samples, n_chains)
    jobs = [(c, base + (1 if c < extra else 0)) for c in range(n_chains)]
    jobs = [j for j in jobs if j[1] > 0]
    work = partial(_chain_samples, model=model, eta=eta, gap=gap, burn_in=burn_in, seed=seed, x0=x0)
    trajs = pmap(work, jobs, n_workers)
    points = np.concatenate([t.states for t in trajs])
    chain_ids = np.concatenate([np.full(len(t.states), t.chain_id) for t in trajs])
    steps = np.concatenate([t.step_indices for t in trajs])
    provenance = {
        "eta": eta,
        "burn_in": burn_in,
        "thin": gap,
        "master_seed": seed,
        "n_chains": n_chains,
        "chain_seeds": [seed_derivation(seed, "chain", c) for c, _ in jobs],
        "generator": GENERATOR_NAME,
        "model": model.to_dict(),
    }
    return SampleSet(points=points, provenance=provenance, chain_ids=chain_ids, step_indices=steps)


def transition_density(model: DiffusionModel, eta: float, x, z) -> float:
    """Density at ``z`` of one EM step from ``x``: Gaussian ``N(x + eta g(x), eta sigma sigma')``."""
    if not eta > 0:
        raise BadConfig("eta must be positive")
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    d = model.d
    r = z - x - eta * drift(model, x)
    w = np.linalg.solve(model.sigma, r.T).T
    quad = np.sum(w * w, axis=-1) / eta
    logdet = d * math.log(eta) + 2.0 * float(np.sum(np.log(np.diag(model.sigma))))
    out = np.exp(-0.5 * (d * math.log(2 * math.pi) + logdet + quad))
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class MomentEstimate:
    value: float
    stderr: float
    n: int


def moment_estimate(samples, ell: float) -> MomentEstimate:
    """Empirical ``E|X|^ell`` with an iid standard error."""
    if ell < 1:
        raise BadConfig("moment order must be >= 1")
    pts = samples.points if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    if pts.size == 0:
        raise EmptyInput("no samples")
    if pts.ndim == 1:
        pts = pts[:, None]
    vals = np.linalg.norm(pts, axis=1) ** ell
    n = len(vals)
    se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return MomentEstimate(float(vals.mean()), se, n)


def one_step_coupling_error(model: DiffusionModel, x, eta: float, n_pairs: int, n_sub: int = 100,
                            seed: int = 0) -> MomentEstimate:
    """Mean-square gap between one EM step and an ``n_sub``-substep EM path over the same interval.

    Both use the same Brownian increments: the coarse normal is the scaled
    sum of the fine ones.  The fine path stands in for the exact diffusion.
    """
    x = _initial_state(model, x)
    rng = make_rng(seed, "replication", 0)
    Z = rng.standard_normal((n_sub, n_pairs, model.d))
    h = eta / n_sub
    fine = np.tile(x, (n_pairs, 1))
    for i in range(n_sub):
        fine = fine + drift(model, fine) * h + math.sqrt(h) * (Z[i] @ model.sigma.T)
    coarse = em_step(model, x, eta, Z.sum(axis=0) / math.sqrt(n_sub))
    sq = np.sum((fine - coarse) ** 2, axis=1)
    return MomentEstimate(float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(n_pairs)), n_pairs)
