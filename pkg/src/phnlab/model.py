"""Coefficients of the M/Ph/n+M limiting diffusion.

The diffusion is ``dX = g(X) dt + sigma dB`` with piecewise-linear drift

    g(x) = -beta p - R x + (R - alpha I) p (e'x)^+

where ``R = (I - P') diag(v)`` is built from phase-type service data
``(p, P, v)``.  Everything here is immutable and pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (
    BadConfig,
    BadEpsilon,
    BadRouting,
    DimensionMismatch,
    IndexOutOfRange,
    NonStochastic,
    NotPositiveDefinite,
    Singular,
)

PROB_TOL = 1e-12
MEAN_TOL = 1e-10
SYM_TOL = 1e-12


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PhaseTypeService:
    """Phase-type service time: initial law ``p``, routing ``P``, rates ``v``."""

    p: np.ndarray
    P: np.ndarray
    v: np.ndarray
    R: np.ndarray = field(repr=False)
    Rinv_p: np.ndarray = field(repr=False)

    @property
    def d(self) -> int:
        return self.p.shape[0]

    @property
    def mean(self) -> float:
        """Mean service time ``e'R^{-1}p``."""
        return float(self.Rinv_p.sum())

    @property
    def zeta(self) -> float:
        return 1.0 / self.mean

    @property
    def is_normalized(self) -> bool:
        return abs(self.mean - 1.0) <= MEAN_TOL

    def to_dict(self) -> dict:
        return {"p": self.p.tolist(), "P": self.P.tolist(), "v": self.v.tolist()}


def build_phase_type(p, P, v) -> PhaseTypeService:
    p = np.asarray(p, dtype=float)
    P = np.asarray(P, dtype=float)
    v = np.asarray(v, dtype=float)
    if p.ndim != 1 or v.shape != p.shape or P.shape != (p.size, p.size):
        raise DimensionMismatch(
            f"expected p (d,), P (d,d), v (d,); got {p.shape}, {P.shape}, {v.shape}"
        )
    if p.size == 0:
        raise DimensionMismatch("phase count must be at least 1")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(P)) and np.all(np.isfinite(v))):
        raise BadConfig("phase-type entries must be finite")
    if np.any(p < 0) or abs(p.sum() - 1.0) > PROB_TOL:
        raise NonStochastic(f"p must be nonnegative and sum to 1 (sum={p.sum()!r})")
    if np.any(P < 0):
        raise BadRouting("P has a negative entry")
    if np.any(np.diag(P) != 0):
        raise BadRouting(f"P must have zero diagonal, got diag={np.diag(P).tolist()}")
    if np.any(P.sum(axis=1) > 1.0 + PROB_TOL):
        raise BadRouting(f"P row sums must be <= 1, got {P.sum(axis=1).tolist()}")
    if np.any(v <= 0):
        raise BadConfig("service rates v must be positive")
    d = p.size
    I = np.eye(d)
    if np.linalg.cond(I - P) > 1e12:
        raise Singular("I - P is not invertible")
    R = (I - P.T) @ np.diag(v)
    Rinv_p = np.linalg.solve(R, p)
    return PhaseTypeService(_frozen(p), _frozen(P), _frozen(v), _frozen(R), _frozen(Rinv_p))


def normalize_mean(pt: PhaseTypeService) -> PhaseTypeService:
    """Rescale all service rates so the service time has mean one."""
    if pt.is_normalized:
        return pt
    return build_phase_type(pt.p, pt.P, pt.v * pt.mean)


def routing_fluctuation(pt: PhaseTypeService, k: int) -> np.ndarray:
    """Multinomial routing covariance of a phase-``k`` completion (``k`` is 1-based)."""
    if not 1 <= k <= pt.d:
        raise IndexOutOfRange(f"phase index k={k} outside 1..{pt.d}")
    row = pt.P[k - 1]
    H = -np.outer(row, row)
    H[np.diag_indices_from(H)] = row * (1.0 - row)
    return H


def covariance(pt: PhaseTypeService) -> np.ndarray:
    """Diffusion covariance ``sigma sigma'`` of the limiting process."""
    if not pt.is_normalized:
        raise BadConfig("covariance requires a mean-1 phase-type distribution; call normalize_mean")
    gamma = pt.Rinv_p / pt.mean
    S = np.diag(pt.p)
    for k in range(1, pt.d + 1):
        S = S + gamma[k - 1] * pt.v[k - 1] * routing_fluctuation(pt, k)
    I = np.eye(pt.d)
    S = S + (I - pt.P.T) @ np.diag(pt.v) @ np.diag(gamma) @ (I - pt.P)
    S = 0.5 * (S + S.T)
    lam_min = float(np.linalg.eigvalsh(S)[0])
    if lam_min <= 0:
        raise NotPositiveDefinite(
            f"sigma sigma' is not positive definite (smallest eigenvalue {lam_min:.3e}); "
            "the ellipticity assumption fails for this model"
        )
    return S


def _op(A) -> float:
    return float(np.linalg.norm(np.atleast_2d(A), 2))


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    pt: PhaseTypeService
    alpha: float
    beta: float
    R: np.ndarray = field(repr=False)
    gamma: np.ndarray = field(repr=False)
    SigmaSq: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)
    c_ellip: float = field(repr=False)
    C_op: float = field(repr=False)
    C_op_tilde: float = field(repr=False)

    @property
    def d(self) -> int:
        return self.pt.d

    @property
    def p(self) -> np.ndarray:
        return self.pt.p

    @cached_property
    def kink_vector(self) -> np.ndarray:
        """``(R - alpha I) p``, the drift correction switched on when ``e'x > 0``."""
        return (self.R - self.alpha * np.eye(self.d)) @ self.p

    def C_m(self, m: int) -> float:
        if m < 2:
            raise ValueError("C_m is defined for integers m >= 2")
        return 2.0 * m * m * self.C_op_tilde

    def to_dict(self) -> dict:
        return {**self.pt.to_dict(), "alpha": self.alpha, "beta": self.beta}


def build_model(pt: PhaseTypeService, alpha: float, beta: float) -> DiffusionModel:
    alpha = float(alpha)
    beta = float(beta)
    if not alpha > 0 or not np.isfinite(alpha):
        raise BadConfig(f"patience rate alpha must be positive, got {alpha}")
    if not np.isfinite(beta):
        raise BadConfig("beta must be finite")
    if not pt.is_normalized:
        raise BadConfig(
            f"service distribution must have mean 1 (e'R^-1 p = {pt.mean!r}); call normalize_mean"
        )
    S = covariance(pt)
    sigma = np.linalg.cholesky(S)
    d = pt.d
    R = pt.R
    gamma = pt.Rinv_p / pt.mean
    kink = (R - alpha * np.eye(d)) @ pt.p
    C_op = _op(R) + _op(np.outer(kink, np.ones(d)))
    C_op_tilde = C_op + float(np.linalg.norm(S, "fro")) + 1.0 + _op(R - alpha * np.eye(d)) + abs(beta)
    return DiffusionModel(
        pt=pt,
        alpha=alpha,
        beta=beta,
        R=R,
        gamma=_frozen(gamma),
        SigmaSq=_frozen(S),
        sigma=_frozen(sigma),
        c_ellip=float(np.linalg.eigvalsh(S)[0]),
        C_op=C_op,
        C_op_tilde=C_op_tilde,
    )


def drift(model: DiffusionModel, x) -> np.ndarray:
    """Evaluate ``g`` at one point ``(d,)`` or a batch ``(..., d)``."""
    x = np.asarray(x, dtype=float)
    s = np.maximum(x.sum(axis=-1), 0.0)
    return -model.beta * model.p - x @ model.R.T + s[..., None] * model.kink_vector


def rho_eps(y, eps: float):
    """C^2 quartic blend of ``y -> y^+`` on ``|y| <= eps``."""
    if not 0 < eps < 1:
        raise BadEpsilon(f"epsilon must lie in (0, 1), got {eps}")
    y = np.asarray(y, dtype=float)
    inner = 3 * eps / 16 - y**4 / (16 * eps**3) + 3 * y**2 / (8 * eps) + y / 2
    out = np.where(y > eps, y, np.where(y < -eps, 0.0, inner))
    return out if out.ndim else float(out)


def smoothed_drift(model: DiffusionModel, x, eps: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    r = np.asarray(rho_eps(x.sum(axis=-1), eps))
    return -model.beta * model.p - x @ model.R.T + r[..., None] * model.kink_vector


def generator_apply(model: DiffusionModel, grad, hess, x) -> np.ndarray | float:
    """Apply the diffusion generator given ``grad f`` and ``hess f`` at ``x``.

    Batched inputs are accepted: ``grad`` and ``x`` of shape ``(..., d)``,
    ``hess`` of shape ``(..., d, d)``.
    """
    grad = np.asarray(grad, dtype=float)
    hess = np.asarray(hess, dtype=float)
    x = np.asarray(x, dtype=float)
    d = model.d
    if grad.shape[-1:] != (d,) or x.shape[-1:] != (d,) or hess.shape[-2:] != (d, d):
        raise DimensionMismatch(
            f"expected grad (...,{d}), hess (...,{d},{d}), x (...,{d}); "
            f"got {grad.shape}, {hess.shape}, {x.shape}"
        )
    out = np.einsum("...i,...i->...", grad, drift(model, x)) + 0.5 * np.einsum(
        "ij,...ij->...", model.SigmaSq, hess
    )
    return out if np.ndim(out) else float(out)


def model_from_dict(spec: dict, normalize: bool | None = None) -> DiffusionModel:
    """Build a model from ``{"p", "P", "v", "alpha", "beta"}``.

    With ``normalize`` (or ``"normalize_mean": true`` in the document) the
    service rates are rescaled to mean one first.
    """
    missing = {"p", "P", "v", "alpha", "beta"} - set(spec)
    if missing:
        raise BadConfig(f"model specification missing keys: {sorted(missing)}")
    pt = build_phase_type(spec["p"], spec["P"], spec["v"])
    if normalize is None:
        normalize = bool(spec.get("normalize_mean", False))
    if normalize:
        pt = normalize_mean(pt)
    return build_model(pt, spec["alpha"], spec["beta"])


def load_model(path) -> DiffusionModel:
    with open(Path(path)) as fh:
        return model_from_dict(json.load(fh))


def exponential_model(alpha: float = 0.5, beta: float = 1.0) -> DiffusionModel:
    """One-phase (M/M/n+M) model with unit service rate."""
    return build_model(build_phase_type([1.0], [[0.0]], [1.0]), alpha, beta)


def erlang2_model(alpha: float = 0.5, beta: float = 1.0) -> DiffusionModel:
    """Two-phase Erlang service with mean one."""
    pt = build_phase_type([1.0, 0.0], [[0.0, 1.0], [0.0, 0.0]], [2.0, 2.0])
    return build_model(pt, alpha, beta)
