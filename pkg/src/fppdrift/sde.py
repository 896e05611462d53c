"""Euler-Maruyama simulation of dX = g(X) dt + sigma dW.

Noise is drawn from a Philox generator keyed by ``SdeConfig.seed``: one
``(N, D)`` block of independent standard normals per step, in step order.
Two rollouts with the same seed and batch shape therefore see identical
noise, which is what the coupled-error experiment relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn_core import MlpParams, mlp_forward, mlp_vjp

DIVERGENCE_LIMIT = 1e8


class SdeDivergence(FloatingPointError):
    """A simulated coordinate left the finite range."""

    def __init__(self, message, step=None, dim=None):
        super().__init__(message)
        self.step = step
        self.dim = dim


@dataclass(frozen=True)
class SdeConfig:
    sigma: float
    dt: float
    n_steps: int
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma}")
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt


@dataclass
class SampleBatch:
    time_index: int
    points: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.shape[0] < 1:
            raise ValueError("a sample batch needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError(f"batch at t_index={self.time_index} has non-finite entries")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


# -- drifts -------------------------------------------------------------------


class Drift:
    """Time-homogeneous drift R^D -> R^D evaluated on ``(N, D)`` batches."""

    tag = "drift"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"tag": self.tag}


@dataclass
class ZeroDrift(Drift):
    tag = "zero"

    def __call__(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))


@dataclass
class ConstantDrift(Drift):
    c: np.ndarray
    tag = "constant"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.c, dtype=float), x.shape).copy()


@dataclass
class LinearDrift(Drift):
    """``g_i(x) = -(A_i x_i + B_i)``; diagonal OU mean reversion."""

    A: np.ndarray
    B: np.ndarray
    tag = "linear"

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.A.shape != self.B.shape or self.A.ndim != 1:
            raise ValueError("A and B must be vectors of equal length")

    def __call__(self, x):
        return -(self.A * np.asarray(x, dtype=float) + self.B)

    def describe(self):
        return {"tag": self.tag, "A": self.A.tolist(), "B": self.B.tolist()}


@dataclass
class ShiftedDrift(Drift):
    """``base(x) + shift``."""

    base: Drift
    shift: np.ndarray
    tag = "shifted"

    def __call__(self, x):
        return self.base(x) + np.asarray(self.shift, dtype=float)


@dataclass
class NeuralDrift(Drift):
    params: MlpParams
    tag = "neural"

    def __post_init__(self):
        if self.params.in_dim != self.params.out_dim:
            raise ValueError("a neural drift must map R^D to R^D")

    def __call__(self, x):
        return mlp_forward(self.params, np.asarray(x, dtype=float))


def as_drift(g) -> Drift:
    if isinstance(g, Drift):
        return g
    if isinstance(g, MlpParams):
        return NeuralDrift(g)
    if callable(g):
        return _CallableDrift(g)
    raise TypeError(f"cannot use {type(g).__name__} as a drift")


@dataclass
class _CallableDrift(Drift):
    fn: object
    tag = "callable"

    def __call__(self, x):
        return np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)


# -- simulation -----------------------------------------------------------------


def noise_generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


def _guard(x: np.ndarray, step):
    bad = ~np.isfinite(x) | (np.abs(x) > DIVERGENCE_LIMIT)
    if bad.any():
        dim = int(np.argwhere(bad)[0][-1])
        where = f" at step {step}" if step is not None else ""
        raise SdeDivergence(f"simulation diverged{where} in dimension {dim}", step=step, dim=dim)


def euler_step(x, g, cfg: SdeConfig, noise, step=None) -> np.ndarray:
    """``x + g(x) dt + sigma sqrt(dt) noise`` for a point or a batch."""
    x = np.asarray(x, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if noise.shape != x.shape:
        raise ValueError(f"noise shape {noise.shape} does not match state shape {x.shape}")
    drift = as_drift(g)
    gx = drift(x[None, :])[0] if x.ndim == 1 else drift(x)
    out = x + gx * cfg.dt + cfg.sigma * np.sqrt(cfg.dt) * noise
    _guard(out, step)
    return out


def _check_record(record, n_steps):
    record = [int(r) for r in record]
    if record != sorted(record):
        raise ValueError("record indices must be sorted")
    if record and (record[0] < 0 or record[-1] > n_steps):
        raise ValueError(f"record indices must lie in [0, {n_steps}]")
    return record


def simulate_path(x0: np.ndarray, g, cfg: SdeConfig, n_steps: int | None = None) -> np.ndarray:
    """All states ``(n_steps + 1, N, D)`` of one rollout."""
    n_steps = cfg.n_steps if n_steps is None else n_steps
    x = np.asarray(x0, dtype=float)
    drift = as_drift(g)
    rng = noise_generator(cfg.seed)
    path = np.empty((n_steps + 1, *x.shape))
    path[0] = x
    scale = cfg.sigma * np.sqrt(cfg.dt)
    for s in range(1, n_steps + 1):
        noise = rng.standard_normal(x.shape)
        x = x + drift(x) * cfg.dt + scale * noise
        _guard(x, s)
        path[s] = x
    return path


def rollout(x0: SampleBatch, g, cfg: SdeConfig, record) -> list[SampleBatch]:
    """Simulate every particle ``cfg.n_steps`` steps; return the recorded snapshots."""
    record = _check_record(record, cfg.n_steps)
    if not record:
        return []
    path = simulate_path(x0.points, g, cfg, n_steps=record[-1])
    out = []
    for r in record:
        out.append(x0 if r == 0 else SampleBatch(x0.time_index + r, path[r].copy()))
    return out


@dataclass
class PathContext:
    """States of a differentiable rollout with a neural drift."""

    params: MlpParams
    cfg: SdeConfig
    path: np.ndarray = field(repr=False)  # (n_steps + 1, N, D)
    t0: int = 0

    @property
    def n_steps(self) -> int:
        return self.path.shape[0] - 1

    def batch(self, step: int) -> SampleBatch:
        return SampleBatch(self.t0 + step, self.path[step])

    def backprop(self, adjoints: dict[int, np.ndarray]) -> MlpParams:
        """Pull adjoints of states (keyed by step) back to the drift parameters.

        Noise draws are held fixed (reparameterization), so
        ``x_{s+1} = x_s + dt g(x_s) + const``.
        """
        grads = self.params.zeros_like()
        if not adjoints:
            return grads
        top = max(adjoints)
        if top > self.n_steps or min(adjoints) < 0:
            raise ValueError("adjoint step outside the simulated path")
        gw = [np.zeros_like(w) for w in grads.weights]
        gb = [np.zeros_like(b) for b in grads.biases]
        dt = self.cfg.dt
        adj = np.zeros_like(self.path[0])
        for s in range(top, 0, -1):
            if s in adjoints:
                adj = adj + adjoints[s]
            pg, gx = mlp_vjp(self.params, self.path[s - 1], adj)
            for l in range(self.params.n_layers):
                gw[l] += dt * pg.weights[l]
                gb[l] += dt * pg.biases[l]
            adj = adj + dt * gx
        return MlpParams(self.params.layer_dims, gw, gb)


def rollout_diff(x0: SampleBatch, g_neural: MlpParams, cfg: SdeConfig, record):
    """Like :func:`rollout`, also returning a :class:`PathContext` for gradients."""
    if not isinstance(g_neural, MlpParams):
        raise TypeError("rollout_diff needs a neural drift (MlpParams)")
    record = _check_record(record, cfg.n_steps)
    n = record[-1] if record else 0
    path = simulate_path(x0.points, g_neural, cfg, n_steps=n) if n else x0.points[None].copy()
    ctx = PathContext(g_neural, cfg, path, x0.time_index)
    snaps = [x0 if r == 0 else ctx.batch(r) for r in record]
    return snaps, ctx
