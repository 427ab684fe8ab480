"""Weighted occupation time of the kink ``e'x = 0``.

    L_t = int_0^t [1 - (e'X_s)^2 / eps^2] 1{|e'X_s| <= eps} ds

estimated by left-endpoint Riemann sums on EM paths.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np

from .em import Trajectory, run_em
from .errors import BadConfig, EmptyInput, ResolutionTooCoarse
from .model import DiffusionModel
from .parallel import pmap
from .seeds import make_rng

RESOLUTION = 10.0


def phi_eps(y, eps: float):
    """C^2 function whose second derivative is the occupation weight."""
    if not eps > 0:
        raise BadConfig("epsilon must be positive")
    y = np.asarray(y, dtype=float)
    inner = -(y**4) / (12 * eps**2) + y**2 / 2
    outer = (2.0 / 3.0) * eps * np.abs(y) - eps**2 / 4
    out = np.where(np.abs(y) <= eps, inner, outer)
    return out if out.ndim else float(out)


def phi_eps_dot(y, eps: float):
    y = np.asarray(y, dtype=float)
    out = np.where(np.abs(y) <= eps, -(y**3) / (3 * eps**2) + y, (2.0 / 3.0) * eps * np.sign(y))
    return out if out.ndim else float(out)


def phi_eps_ddot(y, eps: float):
    y = np.asarray(y, dtype=float)
    out = np.where(np.abs(y) <= eps, 1.0 - y**2 / eps**2, 0.0)
    return out if out.ndim else float(out)


def _weights(s, eps):
    return np.where(np.abs(s) <= eps, 1.0 - s**2 / eps**2, 0.0)


def weighted_occupation(trajectory, eps: float, eta: float | None = None, include_initial: bool = True) -> float:
    """Riemann-sum occupation time of one path.

    ``trajectory`` is a :class:`Trajectory` kept at every step, or an array
    of states on a uniform grid of spacing ``eta`` whose first row is the
    state at time zero.  For a :class:`Trajectory` the initial state is
    prepended and the final state dropped, so ``n`` steps cover ``[0, n eta)``.
    """
    if isinstance(trajectory, Trajectory):
        if trajectory.thin != 1 or trajectory.burn_in != 0:
            raise BadConfig("occupation needs every step from time zero (thin=1, burn_in=0)")
        eta = trajectory.eta
        states = trajectory.states
        if include_initial:
            states = np.concatenate([np.asarray(trajectory.x0)[None, :], states[:-1]]) if len(states) else states
    else:
        if eta is None:
            raise BadConfig("eta is required for raw state arrays")
        states = np.asarray(trajectory, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
    if states.shape[0] == 0:
        raise EmptyInput("empty trajectory")
    s = states.sum(axis=1)
    return float(eta * np.sum(_weights(s, eps)))


@dataclass
class OccupationEstimate:
    epsilon: float
    t_horizon: float
    mean_L: float
    stderr: float
    n_paths: int


@dataclass
class ScalingReport:
    estimates: list
    eta: float
    x0: list
    seed: int
    ratios: list = field(default_factory=list)
    max_pairwise_spread: float = float("nan")
    linear: bool = False
    tolerance: float = 0.2

    def to_dict(self) -> dict:
        return {**asdict(self), "estimates": [asdict(e) for e in self.estimates]}

    def write_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["epsilon", "mean_L", "stderr", "ratio_to_epsilon"])
            for e in self.estimates:
                w.writerow([repr(e.epsilon), repr(e.mean_L), repr(e.stderr), repr(e.mean_L / e.epsilon)])


def _path_occupations(job, model, eta, n_steps, x0, seed, eps_list):
    rng = make_rng(seed, "replication", job)
    x0 = np.asarray(x0, dtype=float)
    states = run_em(model, eta, n_steps, x0, rng)
    s = np.concatenate([[x0.sum()], states[:-1].sum(axis=1)]) if n_steps else np.empty(0)
    return [float(eta * np.sum(_weights(s, eps))) for eps in eps_list]


def occupation_scaling_check(
    model: DiffusionModel,
    x0,
    t: float,
    eps_list,
    n_paths: int,
    seed: int = 0,
    eta: float = 1e-3,
    tolerance: float = 0.2,
    n_workers: int = 1,
) -> ScalingReport:
    """Estimate ``E L_t`` for several ``eps`` on common EM paths and test ``E L ~ eps``.

    The verdict is positive when all ratios ``E L(eps)/eps`` lie within
    ``tolerance`` of each other (relative to the smaller one).
    """
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 3:
        raise BadConfig("need at least three epsilon values")
    if any(a <= b for a, b in zip(eps_list, eps_list[1:])):
        raise BadConfig("eps_list must be strictly decreasing")
    if eta > min(eps_list) / RESOLUTION:
        raise ResolutionTooCoarse(
            f"step {eta} exceeds eps_min/{RESOLUTION:g} = {min(eps_list) / RESOLUTION}; refine eta"
        )
    if t < 0 or n_paths < 2:
        raise BadConfig("need t >= 0 and n_paths >= 2")
    x0 = np.zeros(model.d) if x0 is None else np.asarray(x0, dtype=float).reshape(-1)
    n_steps = int(round(t / eta))
    work = partial(_path_occupations, model=model, eta=eta, n_steps=n_steps, x0=x0, seed=seed, eps_list=eps_list)
    L = np.array(pmap(work, range(n_paths), n_workers)).reshape(n_paths, len(eps_list))
    ests = [
        OccupationEstimate(eps, t, float(L[:, k].mean()), float(L[:, k].std(ddof=1) / math.sqrt(n_paths)), n_paths)
        for k, eps in enumerate(eps_list)
    ]
    ratios = [e.mean_L / e.epsilon for e in ests]
    if min(ratios) > 0:
        spread = max(ratios) / min(ratios) - 1.0
    else:
        spread = float("nan") if max(ratios) == 0 else float("inf")
    linear = bool(np.isfinite(spread) and spread <= tolerance)
    return ScalingReport(ests, eta, x0.tolist(), seed, ratios, spread, linear, tolerance)
