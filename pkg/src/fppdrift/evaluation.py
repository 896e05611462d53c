"""Evaluation metrics and the drift-error bound.

``sinkhorn_w2`` is the error metric for predicted snapshots: entropic OT
with squared Euclidean cost and uniform weights, solved in the log domain,
reported as the square root of the transport cost of the entropic plan.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .sde import SampleBatch, SdeConfig, as_drift, simulate_path
from .seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float | None = None  # absolute; None -> relative_epsilon * mean squared distance
    relative_epsilon: float = 0.01
    max_iters: int = 2000
    tol: float = 1e-6  # L1 marginal violation
    debias: bool = True
    anneal: float = 0.5  # epsilon-scaling factor per warm-start stage; 0 disables

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.relative_epsilon > 0 or not self.tol > 0:
            raise ValueError("relative_epsilon and tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 <= self.anneal < 1:
            raise ValueError("anneal must lie in [0, 1)")


@dataclass
class SinkhornResult:
    value: float
    converged: bool
    iters: int
    epsilon: float
    violation: float
    debiased: bool = True
    plan: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "metric": "sinkhorn_w2",
            "value": self.value,
            "converged": self.converged,
            "iters": self.iters,
            "epsilon": self.epsilon,
            "violation": self.violation,
            "debiased": self.debiased,
        }


def _pts(b):
    x = b.points if isinstance(b, SampleBatch) else np.atleast_2d(np.asarray(b, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    return x


def sqdist(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    c = np.sum(x * x, 1)[:, None] + np.sum(y * y, 1)[None, :] - 2.0 * x @ y.T
    return np.maximum(c, 0.0)


def _softmin(h: np.ndarray, axis: int) -> np.ndarray:
    # log-sum-exp along axis of an already scaled matrix
    m = h.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(h - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _schedule(cost, eps, anneal):
    out = []
    if anneal:
        e = float(cost.max()) or eps
        while e > eps:
            out.append(e)
            e *= anneal
    return out


def _solve(cost: np.ndarray, eps: float, cfg: SinkhornConfig):
    """Log-domain Sinkhorn with uniform weights; returns potentials and stats."""
    n, m = cost.shape
    log_a, log_b = -math.log(n), -math.log(m)
    f, g = np.zeros(n), np.zeros(m)
    it, violation = 0, np.inf
    for e in _schedule(cost, eps, cfg.anneal):
        f = -e * _softmin((g[None, :] - cost) / e + log_b, axis=1)
        g = -e * _softmin((f[:, None] - cost) / e + log_a, axis=0)
        it += 1
    while it < cfg.max_iters:
        f = -eps * _softmin((g[None, :] - cost) / eps + log_b, axis=1)
        g = -eps * _softmin((f[:, None] - cost) / eps + log_a, axis=0)
        it += 1
        if it % 5 == 0 or it >= cfg.max_iters:
            # the g-update makes column sums exact, so row sums carry the violation
            row = np.exp(_softmin((f[:, None] + g[None, :] - cost) / eps + log_b, axis=1) + log_a)
            violation = float(np.abs(row - 1.0 / n).sum())
            if violation <= cfg.tol:
                break
    return f, g, it, violation


def _ot_eps(cost, eps, cfg):
    n, m = cost.shape
    f, g, it, violation = _solve(cost, eps, cfg)
    plan = np.exp((f[:, None] + g[None, :] - cost) / eps - math.log(n) - math.log(m))
    return float(f.mean() + g.mean()), plan, it, violation


def _ot_eps_self(cost, eps, cfg):
    """Symmetric problem OT(a, a): averaged fixed-point iteration on one potential."""
    n = cost.shape[0]
    log_a = -math.log(n)
    f = np.zeros(n)
    it, violation = 0, np.inf
    for e in _schedule(cost, eps, cfg.anneal):
        f = 0.5 * (f - e * _softmin((f[None, :] - cost) / e + log_a, axis=1))
        it += 1
    while it < cfg.max_iters:
        f = 0.5 * (f - eps * _softmin((f[None, :] - cost) / eps + log_a, axis=1))
        it += 1
        row = np.exp(_softmin((f[:, None] + f[None, :] - cost) / eps + log_a, axis=1) + log_a)
        violation = float(np.abs(row - 1.0 / n).sum())
        if violation <= cfg.tol:
            break
    return 2.0 * float(f.mean()), it, violation


def sinkhorn(a, b, cfg: SinkhornConfig = SinkhornConfig(), keep_plan: bool = False) -> SinkhornResult:
    """Entropic OT between two uniform point clouds.

    With ``cfg.debias`` the value is the square root of the Sinkhorn
    divergence ``OT(a,b) - OT(a,a)/2 - OT(b,b)/2`` (zero for identical
    clouds); otherwise it is the square root of the transport cost of the
    entropic plan.
    """
    x, y = _pts(a), _pts(b)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    cost = sqdist(x, y)
    eps = cfg.epsilon
    if eps is None:
        both = np.vstack([x, y])
        scale = float(np.mean(sqdist(both, both)))
        eps = cfg.relative_epsilon * scale if scale > 0 else cfg.relative_epsilon
    dual, plan, it, violation = _ot_eps(cost, eps, cfg)
    converged = violation <= cfg.tol
    if cfg.debias:
        daa, it_a, va = _ot_eps_self(sqdist(x, x), eps, cfg)
        dbb, it_b, vb = _ot_eps_self(sqdist(y, y), eps, cfg)
        sq = dual - 0.5 * (daa + dbb)
        it = max(it, it_a, it_b)
        violation = max(violation, va, vb)
        converged = violation <= cfg.tol
    else:
        sq = float(np.sum(plan * cost))
    if not converged:
        logger.warning("sinkhorn stopped after %d iterations with marginal violation %.3g", it, violation)
    value = math.sqrt(max(sq, 0.0))
    return SinkhornResult(value, converged, it, float(eps), violation, cfg.debias, plan if keep_plan else None)


def sinkhorn_w2(a, b, cfg: SinkhornConfig = SinkhornConfig()) -> float:
    """Entropic approximation of W2 between two point clouds."""
    return sinkhorn(a, b, cfg).value


def exact_w2_1d(a, b) -> float:
    """Exact W2 between equal-size 1-D samples by sorted matching."""
    x, y = np.sort(np.ravel(_pts(a))), np.sort(np.ravel(_pts(b)))
    if x.shape != y.shape:
        raise ValueError("sorted matching needs equal sample sizes")
    return float(np.sqrt(np.mean((x - y) ** 2)))


# -- drift error bound ---------------------------------------------------------------


@dataclass(frozen=True)
class Theorem4Params:
    eps_gen: float
    K: float
    L: float
    T: float
    dt: float
    ex0_sq: float = 0.0

    def __post_init__(self):
        vals = (self.eps_gen, self.K, self.L, self.T, self.dt, self.ex0_sq)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("bound parameters must be finite")
        if self.eps_gen < 0 or self.ex0_sq < 0:
            raise ValueError("eps_gen and ex0_sq must be >= 0")
        if not (self.K > 0 and self.L > 0 and self.T > 0 and self.dt > 0):
            raise ValueError("K, L, T and dt must be positive")
        if self.dt > self.T:
            raise ValueError("dt must not exceed T")


def theorem4_bound(p: Theorem4Params) -> float:
    """``(eps/L)(e^{LT} - 1) + K sqrt(1 + E|X0|^2) dt``."""
    growth = p.eps_gen * math.expm1(p.L * p.T) / p.L
    return growth + p.K * math.sqrt(1.0 + p.ex0_sq) * p.dt


def discrete_bound(eps_gen: float, L: float, dt: float, n_steps: int) -> float:
    """Pre-limit form ``eps dt sum_{i<n} (1 + L dt)^i``."""
    r = 1.0 + L * dt
    return eps_gen * dt * sum(r**i for i in range(n_steps))


def sup_drift_gap(g_r, g_f, lo, hi, resolution: int = 41) -> float:
    """Sup-norm of ``g_r - g_f`` (Euclidean per point) over a grid on a box."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    axes = [np.linspace(a, b, resolution) for a, b in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
    diff = as_drift(g_r)(grid) - as_drift(g_f)(grid)
    return float(np.max(np.linalg.norm(diff, axis=1)))


@dataclass
class CoupledErrorResult:
    empirical_error: float
    bound: float
    discrete_bound: float
    eps_gen: float
    L: float
    grid_resolution: int
    errors_per_step: np.ndarray = field(repr=False)


def coupled_error_experiment(
    g_r,
    g_f,
    cfg: SdeConfig,
    n: int,
    L: float,
    K: float = 1.0,
    dim: int | None = None,
    x0: np.ndarray | None = None,
    eps_gen: float | None = None,
    resolution: int = 41,
) -> CoupledErrorResult:
    """Simulate both drifts from the same start with common noise.

    Returns the mean terminal deviation ``E|X^r_T - X^f_T|`` next to the
    closed-form and pre-limit bounds. When ``eps_gen`` is not given it is
    estimated as the sup-norm drift gap on a grid spanning the 3-sigma box
    of the reference paths.
    """
    if x0 is None:
        if dim is None:
            raise ValueError("give either x0 or dim")
        x0 = np.random.default_rng(derive_seed(cfg.seed, "coupled", "x0")).standard_normal((n, dim))
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[0] != n:
        raise ValueError("x0 must hold n points")
    pr = simulate_path(x0, g_r, cfg)
    pf = simulate_path(x0, g_f, cfg)  # same seed -> same noise
    errs = np.mean(np.linalg.norm(pr - pf, axis=-1), axis=1)
    if eps_gen is None:
        flat = pr.reshape(-1, x0.shape[1])
        mu, sd = flat.mean(0), flat.std(0)
        eps_gen = sup_drift_gap(g_r, g_f, mu - 3 * sd, mu + 3 * sd, resolution)
    ex0_sq = float(np.mean(np.sum(x0 * x0, axis=1)))
    bound = theorem4_bound(Theorem4Params(eps_gen, K, L, cfg.horizon, cfg.dt, ex0_sq))
    return CoupledErrorResult(
        float(errs[-1]), bound, discrete_bound(eps_gen, L, cfg.dt, cfg.n_steps), eps_gen, L, resolution, errs
    )


def mode_coverage(samples, means, radius: float | None = None) -> np.ndarray:
    """Fraction of points whose nearest centre is each of ``means``.

    With ``radius`` set, points farther than that from their nearest centre
    are left unassigned, so the fractions may sum to less than one.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    if means.shape[0] == 0 or means.size == 0:
        raise ValueError("no mode centres given")
    x = _pts(samples)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    d2 = sqdist(x, means)
    nearest = np.argmin(d2, axis=1)
    if radius is not None:
        nearest = nearest[d2[np.arange(x.shape[0]), nearest] <= radius**2]
    return np.bincount(nearest, minlength=means.shape[0]) / x.shape[0]
