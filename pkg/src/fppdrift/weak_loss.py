"""Weak-form Wasserstein losses built on the Fokker-Planck generator.

For a test function ``f`` (the critic) and drift ``g`` the generator of the
diffusion acts as

    (L f)(x) = g(x) . grad f(x) + 0.5 sigma^2 * H f(x)

where ``H f`` is the Laplacian (``hessian_mode='laplacian'``) or the sum of
all Hessian entries (``'full'``). :func:`f_operator` averages ``L f`` over a
batch. The distances compare the critic's mean on real data at the end
time with the prediction ``mean f(x_0) + integral of F`` obtained by the
trapezoid rule over a generated path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boundary import EllipseBoundary, batch_penalty, penalty_grad
from .nn_core import HESSIAN_MODES, MlpParams, hessian_directions, jet_backward, jet_forward, mlp_forward, mlp_vjp
from .sde import NeuralDrift, PathContext, SampleBatch, as_drift


@dataclass(frozen=True)
class WeakLossConfig:
    sigma: float
    dt: float
    hessian_mode: str = "laplacian"
    detach_path: bool = False

    def __post_init__(self):
        if self.hessian_mode not in HESSIAN_MODES:
            raise ValueError(f"hessian_mode must be one of {HESSIAN_MODES}, got {self.hessian_mode!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


def _points(b) -> np.ndarray:
    pts = b.points if isinstance(b, SampleBatch) else np.atleast_2d(np.asarray(b, dtype=float))
    if pts.shape[0] == 0:
        raise ValueError("empty batch")
    return pts


def _check_dims(pts, f: MlpParams):
    if f.out_dim != 1:
        raise ValueError("critic must have scalar output")
    if pts.shape[1] != f.in_dim:
        raise ValueError(f"batch dimension {pts.shape[1]} does not match critic input {f.in_dim}")


def _operator_jet(x: np.ndarray, gx: np.ndarray, f: MlpParams, cfg: WeakLossConfig):
    """Jet of ``f`` along ``g(x)`` (slot 0) and the Hessian directions (slots 1..)."""
    hd = hessian_directions(x.shape[1], cfg.hessian_mode)
    dirs = np.concatenate([gx[:, None, :], np.broadcast_to(hd, (x.shape[0], *hd.shape))], axis=1)
    jet = jet_forward(f, x, dirs)
    return jet


def _integrand(jet, sigma: float) -> np.ndarray:
    return jet.d1[:, 0, 0] + 0.5 * sigma**2 * jet.d2[:, 1:, 0].sum(axis=1)


def operator_terms(batch, g, f: MlpParams, cfg: WeakLossConfig) -> np.ndarray:
    """Per-sample values of ``(L f)(x_k)``."""
    x = _points(batch)
    _check_dims(x, f)
    gx = as_drift(g)(x)
    if gx.shape != x.shape:
        raise ValueError(f"drift returned shape {gx.shape} for points of shape {x.shape}")
    vals = _integrand(_operator_jet(x, gx, f, cfg), cfg.sigma)
    bad = ~np.isfinite(vals)
    if bad.any():
        raise FloatingPointError(f"non-finite operator contribution at sample {int(np.argmax(bad))}")
    return vals


def f_operator(batch, g, f: MlpParams, cfg: WeakLossConfig) -> float:
    """Batch average of ``g . grad f + 0.5 sigma^2 H f``."""
    return float(np.mean(operator_terms(batch, g, f, cfg)))


def trapezoid_weights(n: int, dt: float) -> np.ndarray:
    """Weights ``dt/2 * (1, 2, ..., 2, 1)`` for ``n`` equal sub-intervals."""
    if n < 1:
        raise ValueError("need at least one sub-interval")
    w = np.full(n + 1, dt)
    w[0] = w[-1] = dt / 2
    return w


def trapezoid_weights_at(times: Sequence[float]) -> np.ndarray:
    """Trapezoid weights for arbitrary increasing node times."""
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or t.size < 2 or np.any(np.diff(t) <= 0):
        raise ValueError("node times must be strictly increasing with at least two entries")
    h = np.diff(t)
    w = np.zeros_like(t)
    w[:-1] += h / 2
    w[1:] += h / 2
    return w


def _path_weights(path, cfg, times):
    if len(path) < 2:
        raise ValueError("a path needs at least two batches")
    if times is None:
        return trapezoid_weights(len(path) - 1, cfg.dt)
    if len(times) != len(path):
        raise ValueError("times and path lengths differ")
    return trapezoid_weights_at(times)


def one_step_distance(real_m, real_m1, g, f: MlpParams, cfg: WeakLossConfig) -> float:
    """Weak distance when the generated data moves one step from ``real_m1``."""
    xm, xm1 = _points(real_m), _points(real_m1)
    _check_dims(xm, f)
    _check_dims(xm1, f)
    means = float(np.mean(mlp_forward(f, xm))) - float(np.mean(mlp_forward(f, xm1)))
    return means - cfg.dt / 2 * (f_operator(xm1, g, f, cfg) + f_operator(xm, g, f, cfg))


def multi_step_distance(real_end, path, g, f: MlpParams, cfg: WeakLossConfig, times=None) -> float:
    """Weak distance at the end of a generated path ``[x_m0, x_m1, ..., x_mn]``.

    ``times`` gives the physical node times when the nodes are not ``dt``
    apart; trapezoid weights then follow the actual interval widths.
    """
    w = _path_weights(path, cfg, times)
    end = _points(real_end)
    _check_dims(end, f)
    start = _points(path[0])
    value = float(np.mean(mlp_forward(f, end))) - float(np.mean(mlp_forward(f, start)))
    for wi, b in zip(w, path):
        value -= wi * f_operator(b, g, f, cfg)
    return value


def critic_loss_and_grads(real_end, path, g, f: MlpParams, cfg: WeakLossConfig, times=None):
    """Value of :func:`multi_step_distance` and its gradient w.r.t. the critic.

    The critic maximizes this value, so a minimizing optimizer should be fed
    the negated gradient. Generated batches are constants here.
    """
    w = _path_weights(path, cfg, times)
    drift = as_drift(g)
    end = _points(real_end)
    _check_dims(end, f)
    pts = [_points(b) for b in path]
    n_end, n_start = end.shape[0], pts[0].shape[0]

    # value terms: +mean f(real_end), -mean f(x_m0)
    vx = np.concatenate([end, pts[0]])
    vjet = jet_forward(f, vx, np.zeros((0, f.in_dim)))
    vcot = np.concatenate([np.full(n_end, 1.0 / n_end), np.full(n_start, -1.0 / n_start)])
    value = float(vcot @ vjet.value[:, 0])
    grads, _, _ = jet_backward(f, vjet, vcot[:, None], None, None, need_inputs=False)

    # operator terms over all path nodes in one pass
    x = np.concatenate(pts)
    gx = drift(x)
    node_w = np.concatenate([np.full(p.shape[0], wi / p.shape[0]) for wi, p in zip(w, pts)])
    jet = _operator_jet(x, gx, f, cfg)
    value -= float(node_w @ _integrand(jet, cfg.sigma))
    k = jet.d1.shape[1]
    g1 = np.zeros((x.shape[0], k, 1))
    g2 = np.zeros((x.shape[0], k, 1))
    g1[:, 0, 0] = -node_w
    g2[:, 1:, 0] = -0.5 * cfg.sigma**2 * node_w[:, None]
    og, _, _ = jet_backward(f, jet, None, g1, g2, need_inputs=False)
    grads = grads.with_arrays([a + b for a, b in zip(grads.arrays(), og.arrays())])
    if not np.isfinite(value):
        raise FloatingPointError("critic loss is not finite")
    return value, grads


@dataclass
class CriticTerm:
    """One critic's share of the generator objective.

    ``steps`` are the path steps (indices into the rollout) used as trapezoid
    nodes; the last one is the critic's target time.
    """

    f: MlpParams
    steps: Sequence[int]
    times: Sequence[float] | None = None


def generator_loss_and_grads(
    g: MlpParams,
    ctx: PathContext,
    terms: Sequence[CriticTerm],
    cfg: WeakLossConfig,
    boundary: EllipseBoundary | None = None,
    alpha: float = 0.0,
):
    """Value and drift-parameter gradient of ``sum_n (-trapezoid_n + alpha S_n)``.

    ``trapezoid_n`` is the weighted sum of ``F`` over the critic's nodes.
    The gradient covers the explicit ``g(x)`` inside ``F`` and, unless
    ``cfg.detach_path``, the dependence of generated samples on ``g``
    through the rollout.
    """
    if ctx.params is not g and not all(np.array_equal(a, b) for a, b in zip(ctx.params.arrays(), g.arrays())):
        raise ValueError("path context was generated with different drift parameters")
    if alpha and boundary is None:
        raise ValueError("alpha > 0 needs a fitted boundary")
    drift = NeuralDrift(g)
    grads = g.zeros_like()
    acc = [a for a in grads.arrays()]
    adjoints: dict[int, np.ndarray] = {}
    value = 0.0

    def add_adjoint(step, adj):
        if step == 0 or cfg.detach_path:
            return  # step 0 is real data
        adjoints[step] = adjoints[step] + adj if step in adjoints else adj

    for term in terms:
        steps = list(term.steps)
        if len(steps) < 2:
            # no time elapses, so the generator plays no part
            continue
        if term.times is None:
            w = trapezoid_weights(len(steps) - 1, cfg.dt)
        else:
            w = trapezoid_weights_at(term.times)
        pts = [ctx.path[s] for s in steps]
        sizes = [p.shape[0] for p in pts]
        x = np.concatenate(pts)
        gx = drift(x)
        jet = _operator_jet(x, gx, term.f, cfg)
        node_w = np.concatenate([np.full(n, wi / n) for wi, n in zip(w, sizes)])
        value -= float(node_w @ _integrand(jet, cfg.sigma))
        k = jet.d1.shape[1]
        g1 = np.zeros((x.shape[0], k, 1))
        g2 = np.zeros((x.shape[0], k, 1))
        g1[:, 0, 0] = -node_w
        g2[:, 1:, 0] = -0.5 * cfg.sigma**2 * node_w[:, None]
        _, gx_f, gdirs = jet_backward(term.f, jet, None, g1, g2)
        pg, gx_g = mlp_vjp(g, x, gdirs[:, 0, :])
        acc = [a + b for a, b in zip(acc, pg.arrays())]
        adj_x = gx_f + gx_g
        pos = 0
        for s, n in zip(steps, sizes):
            add_adjoint(s, adj_x[pos : pos + n])
            pos += n
        if alpha:
            end = ctx.path[steps[-1]]
            value += alpha * batch_penalty(end, boundary)
            add_adjoint(steps[-1], alpha * penalty_grad(end, boundary))

    if adjoints:
        path_grads = ctx.backprop(adjoints)
        acc = [a + b for a, b in zip(acc, path_grads.arrays())]
    if not np.isfinite(value):
        raise FloatingPointError("generator loss is not finite")
    return value, g.with_arrays(acc)
