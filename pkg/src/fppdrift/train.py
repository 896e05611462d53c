"""Adversarial training of the drift network against per-time critics.

One critic ``f_n`` per observed target time ``m_n`` (n = 1..J). Each outer
iteration draws one rollout of the current drift from the real batch at
``m_0``; the critics take ``critic_steps`` Adam ascent steps on their weak
distance (each followed by spectral normalization), then the drift takes
one Adam descent step on the summed generator objective.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .boundary import EllipseBoundary, batch_penalty, fit_ellipse
from .data import DatasetBundle
from .nn_core import AdamState, MlpParams, SpectralState, adam_step, mlp_init, spectral_normalize
from .sde import SampleBatch, SdeConfig, rollout_diff
from .seeding import derive_seed
from .weak_loss import CriticTerm, WeakLossConfig, critic_loss_and_grads, generator_loss_and_grads

logger = logging.getLogger(__name__)

TRAPEZOID_MODES = ("dense", "observed")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, iteration):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    iters: int = 1000
    critic_steps: int = 5
    lr: float = 1e-4
    lr_g: float | None = None  # None -> lr
    lr_f: float | None = None  # None -> lr
    lr_final_frac: float = 1.0  # learning rates decay linearly to this fraction by the last iteration
    alpha: float = 0.0
    observed_indices: tuple[int, ...] | None = None  # None -> bundle.train_indices
    hessian_mode: str = "laplacian"
    detach_path: bool = False
    trapezoid: str = "dense"
    node_stride: int = 1
    g_hidden: tuple[int, ...] = (32,)
    f_hidden: tuple[int, ...] = (32, 32, 32)
    sn_iters: int = 1
    boundary_scale: float = 3.0
    boundary_per_time: bool = False
    seed: int = 0

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> list[str]:
        errs = []
        if self.iters < 0:
            errs.append("iters must be >= 0")
        if self.critic_steps < 1:
            errs.append("critic_steps must be >= 1")
        for name in ("lr", "lr_g", "lr_f"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                errs.append(f"{name} must be >= 0")
        if not self.lr > 0:
            errs.append("lr must be > 0")
        if not 0 < self.lr_final_frac <= 1:
            errs.append("lr_final_frac must lie in (0, 1]")
        if not self.alpha >= 0:
            errs.append("alpha must be >= 0")
        if self.trapezoid not in TRAPEZOID_MODES:
            errs.append(f"trapezoid must be one of {TRAPEZOID_MODES}")
        if self.node_stride < 1:
            errs.append("node_stride must be >= 1")
        if self.sn_iters < 1:
            errs.append("sn_iters must be >= 1")
        if self.hessian_mode not in ("laplacian", "full"):
            errs.append("hessian_mode must be laplacian or full")
        if self.observed_indices is not None:
            obs = list(self.observed_indices)
            if len(obs) < 2 or obs != sorted(set(obs)):
                errs.append("observed_indices must be strictly increasing with at least two entries")
        if not self.boundary_scale > 0:
            errs.append("boundary_scale must be > 0")
        return errs

    @property
    def g_lr(self) -> float:
        return self.lr if self.lr_g is None else self.lr_g

    @property
    def f_lr(self) -> float:
        return self.lr if self.lr_f is None else self.lr_f

    def lr_scale(self, it: int) -> float:
        if self.iters <= 1:
            return 1.0
        return 1.0 - (1.0 - self.lr_final_frac) * it / (self.iters - 1)


@dataclass
class TrainReport:
    critic_losses: list[list[float]] = field(default_factory=list)  # per iter, per critic (last inner step)
    inner_losses: list[list[list[float]]] = field(default_factory=list)  # per iter, per inner step, per critic
    gen_losses: list[float] = field(default_factory=list)
    penalties: list[float] = field(default_factory=list)
    elapsed_ms: list[float] = field(default_factory=list)
    g: MlpParams | None = None
    critics: list[MlpParams] = field(default_factory=list)
    boundary: EllipseBoundary | list[EllipseBoundary] | None = None
    boundary_fit_count: int = 0
    observed_indices: tuple[int, ...] = ()

    def log_record(self, i: int) -> dict:
        return {
            "iter": i,
            "critic_losses": self.critic_losses[i],
            "gen_loss": self.gen_losses[i],
            "penalty": self.penalties[i],
            "elapsed_ms": self.elapsed_ms[i],
        }


def node_steps(targets: Sequence[int], n: int, mode: str, stride: int = 1) -> list[int]:
    """Trapezoid nodes (steps after ``m_0``) for the critic of target ``n``.

    ``targets`` are the observed steps relative to ``m_0`` (first is 0).
    ``observed`` uses only observation times; ``dense`` adds every
    ``stride``-th Euler step in between.
    """
    end = targets[n]
    if mode == "observed":
        return list(targets[: n + 1])
    nodes = set(range(0, end + 1, stride)) | set(targets[: n + 1])
    return sorted(nodes)


def init_networks(dim: int, cfg: TrainConfig, n_critics: int):
    g = mlp_init([dim, *cfg.g_hidden, dim], derive_seed(cfg.seed, "init", "g"))
    critics, spectral = [], []
    for n in range(n_critics):
        f = mlp_init([dim, *cfg.f_hidden, 1], derive_seed(cfg.seed, "init", "f", n))
        s = SpectralState.init(f, derive_seed(cfg.seed, "spectral", n))
        f, s = spectral_normalize(f, s, max(cfg.sn_iters, 20))
        critics.append(f)
        spectral.append(s)
    return g, critics, spectral


def _fit_boundaries(bundle: DatasetBundle, obs, cfg: TrainConfig):
    if cfg.boundary_per_time:
        return [fit_ellipse(bundle.train[t], cfg.boundary_scale) for t in obs[1:]]
    pooled = np.concatenate([bundle.train[t].points for t in obs])
    return fit_ellipse(pooled, cfg.boundary_scale)


def train_fpp(
    bundle: DatasetBundle,
    cfg: TrainConfig,
    on_iteration: Callable[[int, TrainReport], None] | None = None,
    init: tuple | None = None,
) -> TrainReport:
    """Train the drift network; ``cfg.alpha > 0`` adds the boundary penalty.

    ``init`` optionally supplies ``(g, critics)`` to start from.
    """
    obs = tuple(cfg.observed_indices or bundle.train_indices)
    missing = [t for t in obs if t not in bundle.train]
    if missing:
        raise ValueError(f"bundle has no training batch at indices {missing}")
    dim = bundle.dim
    m0 = obs[0]
    targets = [t - m0 for t in obs]
    n_critics = len(obs) - 1
    wcfg = WeakLossConfig(bundle.sigma, bundle.dt, cfg.hessian_mode, cfg.detach_path)
    nodes = [node_steps(targets, n, cfg.trapezoid, cfg.node_stride) for n in range(1, n_critics + 1)]
    times = [[s * bundle.dt for s in ns] for ns in nodes]

    g, critics, spectral = init_networks(dim, cfg, n_critics)
    if init is not None:
        g, critics = init[0].copy(), [f.copy() for f in init[1]]
    g_adam = AdamState.init(g)
    f_adam = [AdamState.init(f) for f in critics]

    report = TrainReport(observed_indices=obs)
    boundary = None
    if cfg.alpha > 0:
        boundary = _fit_boundaries(bundle, obs, cfg)
        report.boundary = boundary
        report.boundary_fit_count = 1

    def boundary_for(n):
        return boundary[n] if isinstance(boundary, list) else boundary

    x0 = bundle.train[m0]
    record = list(range(targets[-1] + 1))
    for it in range(cfg.iters):
        t_start = time.perf_counter()
        scale = cfg.lr_scale(it)
        scfg = SdeConfig(bundle.sigma, bundle.dt, targets[-1], derive_seed(cfg.seed, "rollout", it))
        try:
            _, ctx = rollout_diff(x0, g, scfg, record)
        except FloatingPointError as exc:
            raise TrainingDiverged(str(exc), it) from exc
        paths = [[SampleBatch(m0 + s, ctx.path[s]) for s in ns] for ns in nodes]
        penalty = 0.0
        if boundary is not None:
            penalty = sum(cfg.alpha * batch_penalty(ctx.path[targets[n + 1]], boundary_for(n)) for n in range(n_critics))

        inner = []
        for _ in range(cfg.critic_steps):
            row = []
            for n in range(n_critics):
                value, grads = critic_loss_and_grads(bundle.train[obs[n + 1]], paths[n], g, critics[n], wcfg, times[n])
                if boundary is not None:
                    value += cfg.alpha * batch_penalty(ctx.path[targets[n + 1]], boundary_for(n))
                if not np.isfinite(value):
                    raise TrainingDiverged("critic loss is not finite", it)
                neg = grads.with_arrays([-a for a in grads.arrays()])
                f, f_adam[n] = adam_step(critics[n], neg, f_adam[n], cfg.f_lr * scale)
                critics[n], spectral[n] = spectral_normalize(f, spectral[n], cfg.sn_iters)
                row.append(value)
            inner.append(row)

        terms = [CriticTerm(critics[n], nodes[n], times[n]) for n in range(n_critics)]
        if n_critics == 1:
            bnd = boundary_for(0) if boundary is not None else None
            gen_value, g_grads = generator_loss_and_grads(g, ctx, terms, wcfg, bnd, cfg.alpha)
        else:
            gen_value, g_grads = _generator_multi(g, ctx, terms, wcfg, boundary, cfg.alpha)
        if not np.isfinite(gen_value):
            raise TrainingDiverged("generator loss is not finite", it)
        try:
            g, g_adam = adam_step(g, g_grads, g_adam, cfg.g_lr * scale)
        except ValueError as exc:
            raise TrainingDiverged(str(exc), it) from exc

        report.inner_losses.append(inner)
        report.critic_losses.append(inner[-1])
        report.gen_losses.append(float(gen_value))
        report.penalties.append(float(penalty))
        report.elapsed_ms.append((time.perf_counter() - t_start) * 1e3)
        report.g, report.critics = g, critics
        if on_iteration is not None:
            on_iteration(it, report)

    report.g, report.critics = g, critics
    return report


def _generator_multi(g, ctx, terms, wcfg, boundary, alpha):
    if not isinstance(boundary, list):
        return generator_loss_and_grads(g, ctx, terms, wcfg, boundary, alpha)
    # per-time boundaries: one call per critic, summed
    total, acc = 0.0, None
    for term, b in zip(terms, boundary):
        v, gr = generator_loss_and_grads(g, ctx, [term], wcfg, b, alpha)
        total += v
        acc = gr.arrays() if acc is None else [x + y for x, y in zip(acc, gr.arrays())]
    return total, g.with_arrays(acc)


def train_fpp_constrained(bundle: DatasetBundle, cfg: TrainConfig, **kwargs) -> TrainReport:
    """Training with the elliptical boundary penalty (requires ``alpha > 0``)."""
    if not cfg.alpha > 0:
        raise ValueError("the constrained variant needs alpha > 0")
    return train_fpp(bundle, cfg, **kwargs)


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d
