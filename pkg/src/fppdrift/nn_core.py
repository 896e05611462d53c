"""Small tanh MLPs with closed-form input derivatives.

Hidden layers use tanh, the output layer is affine. Besides the plain
forward pass, :func:`jet_forward` propagates first and second directional
derivatives along a set of input directions (forward mode), and
:func:`jet_backward` pulls adjoints of those quantities back to the
parameters, the inputs and the directions (reverse mode). Everything the
weak-form loss needs is built on this pair.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

HESSIAN_MODES = ("laplacian", "full")


@dataclass
class MlpParams:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("number of weight/bias arrays does not match layer_dims")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[l + 1], self.layer_dims[l])
            if w.shape != shape or b.shape != (shape[0],):
                raise ValueError(
                    f"layer {l}: expected W{shape} and b({shape[0]},), got {w.shape} and {b.shape}"
                )

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "MlpParams":
        return MlpParams(self.layer_dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            self.layer_dims, [np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases]
        )

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        n = self.n_layers
        return MlpParams(self.layer_dims, list(arrays[:n]), list(arrays[n:]))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, vec: np.ndarray) -> "MlpParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[pos : pos + a.size], dtype=float).reshape(a.shape).copy())
            pos += a.size
        if pos != len(vec):
            raise ValueError(f"flat vector has {len(vec)} entries, expected {pos}")
        return self.with_arrays(out)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def _check_dims(layer_dims):
    dims = list(layer_dims)
    if len(dims) < 2:
        raise ValueError("layer_dims needs at least an input and an output size")
    if any(int(d) != d or d < 1 for d in dims):
        raise ValueError(f"layer sizes must be positive integers, got {dims}")
    return [int(d) for d in dims]


def mlp_init(layer_dims: Sequence[int], seed: int) -> MlpParams:
    """Xavier-uniform weights, zero biases; deterministic in ``seed``."""
    dims = _check_dims(layer_dims)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(dims), weights, biases)


def _as_batch(p: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != p.in_dim:
        raise ValueError(f"input has shape {x.shape}, network expects last dimension {p.in_dim}")
    return xb, single


def mlp_forward(p: MlpParams, x) -> np.ndarray:
    """Evaluate the network at one point ``(D,)`` or a batch ``(N, D)``."""
    a, single = _as_batch(p, x)
    last = p.n_layers - 1
    for l, (w, b) in enumerate(zip(p.weights, p.biases)):
        a = a @ w.T + b
        if l < last:
            a = np.tanh(a)
    return a[0] if single else a


@dataclass
class Jet:
    """Forward-mode intermediates of one :func:`jet_forward` call.

    ``value`` is ``(N, out)``; ``d1`` and ``d2`` are ``(N, K, out)`` holding
    the first directional derivative along each direction and the second
    directional derivative along the same direction twice.
    """

    value: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    acts: list = field(repr=False)  # per layer input: (a, da, dda)
    slopes: list = field(repr=False)  # per hidden layer: (z_dot, z_ddot, s, s2, a_out)


def jet_forward(p: MlpParams, x: np.ndarray, dirs: np.ndarray) -> Jet:
    """Propagate value, ``f'(x)[u]`` and ``f''(x)[u, u]`` for every direction ``u``.

    ``x`` is ``(N, D)``; ``dirs`` is ``(N, K, D)`` or ``(K, D)`` (shared by all
    points).
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    dirs = np.asarray(dirs, dtype=float)
    if dirs.ndim == 2:
        dirs = np.broadcast_to(dirs, (n, *dirs.shape))
    a, da = x, dirs
    dda = np.zeros_like(dirs)
    acts, slopes = [], []
    last = p.n_layers - 1
    for l, (w, b) in enumerate(zip(p.weights, p.biases)):
        acts.append((a, da, dda))
        z = a @ w.T + b
        zd = da @ w.T
        zdd = dda @ w.T
        if l == last:
            return Jet(z, zd, zdd, acts, slopes)
        t = np.tanh(z)
        s = 1.0 - t * t
        s2 = -2.0 * t * s
        a = t
        da = s[:, None, :] * zd
        dda = s[:, None, :] * zdd + s2[:, None, :] * zd * zd
        slopes.append((zd, zdd, s, s2, t))
    raise AssertionError("unreachable")


def jet_backward(p: MlpParams, jet: Jet, g_value, g_d1, g_d2, need_inputs: bool = True):
    """Reverse pass through :func:`jet_forward`.

    ``g_value`` (N, out), ``g_d1`` and ``g_d2`` (N, K, out) are adjoints of the
    jet outputs; any of them may be ``None``. Returns ``(param_grads, gx, gdirs)``
    where ``param_grads`` is an :class:`MlpParams` of gradients and ``gx``,
    ``gdirs`` are the adjoints of the input points and directions.
    """
    n, k = jet.d1.shape[:2]
    out = p.out_dim
    ga = np.zeros((n, out)) if g_value is None else np.asarray(g_value, dtype=float).reshape(n, out)
    gda = np.zeros((n, k, out)) if g_d1 is None else np.asarray(g_d1, dtype=float)
    gdda = np.zeros((n, k, out)) if g_d2 is None else np.asarray(g_d2, dtype=float)
    gw = [None] * p.n_layers
    gb = [None] * p.n_layers
    for l in range(p.n_layers - 1, -1, -1):
        if l < p.n_layers - 1:
            zd, zdd, s, s2, t = jet.slopes[l]
            # value: a = tanh z; d1: s*zd; d2: s*zdd + s2*zd^2
            gs = (gda * zd + gdda * zdd).sum(axis=1)
            gs2 = (gdda * zd * zd).sum(axis=1)
            gzd = s[:, None, :] * gda + 2.0 * s2[:, None, :] * zd * gdda
            gzdd = s[:, None, :] * gdda
            s3 = -2.0 * s * s + 4.0 * t * t * s
            gz = ga * s + gs * s2 + gs2 * s3
        else:
            gz, gzd, gzdd = ga, gda, gdda
        a, da, dda = jet.acts[l]
        w = p.weights[l]
        gw[l] = gz.T @ a
        if k:
            o, i = w.shape
            gw[l] += gzd.reshape(-1, o).T @ da.reshape(-1, i) + gzdd.reshape(-1, o).T @ dda.reshape(-1, i)
        gb[l] = gz.sum(axis=0)
        if l > 0 or need_inputs:
            ga = gz @ w
            gda = gzd @ w
            gdda = gzdd @ w
    grads = MlpParams(p.layer_dims, gw, gb)
    if not need_inputs:
        return grads, None, None
    return grads, ga, gda


def mlp_vjp(p: MlpParams, x: np.ndarray, cotangent: np.ndarray):
    """Gradients of ``sum(cotangent * f(x))`` w.r.t. parameters and inputs."""
    xb, _ = _as_batch(p, x)
    jet = jet_forward(p, xb, np.zeros((0, p.in_dim)))
    grads, gx, _ = jet_backward(p, jet, cotangent, None, None)
    return grads, gx


def _require_scalar(p: MlpParams):
    if p.out_dim != 1:
        raise ValueError(f"network output dimension is {p.out_dim}, a scalar network is required")


def mlp_grad_input(p: MlpParams, x) -> np.ndarray:
    """Exact gradient of a scalar network w.r.t. its input."""
    _require_scalar(p)
    xb, single = _as_batch(p, x)
    jet = jet_forward(p, xb, np.eye(p.in_dim))
    g = jet.d1[:, :, 0]
    return g[0] if single else g


def hessian_directions(dim: int, mode: str) -> np.ndarray:
    """Directions whose second derivatives sum to the requested Hessian sum.

    The Laplacian is the sum over the unit vectors; the sum of all Hessian
    entries is ``1^T H 1``, a single direction.
    """
    if mode == "laplacian":
        return np.eye(dim)
    if mode == "full":
        return np.ones((1, dim))
    raise ValueError(f"hessian mode must be one of {HESSIAN_MODES}, got {mode!r}")


def mlp_hessian_sum(p: MlpParams, x, mode: str = "laplacian"):
    """Laplacian (``mode='laplacian'``) or sum of all Hessian entries (``'full'``)."""
    _require_scalar(p)
    xb, single = _as_batch(p, x)
    jet = jet_forward(p, xb, hessian_directions(p.in_dim, mode))
    h = jet.d2[:, :, 0].sum(axis=1)
    return float(h[0]) if single else h


# -- spectral normalization -------------------------------------------------

_SIGMA_FLOOR = 1e-12


@dataclass
class SpectralState:
    u: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def init(cls, p: MlpParams, seed: int) -> "SpectralState":
        rng = np.random.default_rng(seed)
        us, vs = [], []
        for w in p.weights:
            u = rng.standard_normal(w.shape[0])
            v = rng.standard_normal(w.shape[1])
            us.append(u / np.linalg.norm(u))
            vs.append(v / np.linalg.norm(v))
        return cls(us, vs)

    def copy(self) -> "SpectralState":
        return SpectralState([u.copy() for u in self.u], [v.copy() for v in self.v])


def power_iteration(w: np.ndarray, u: np.ndarray, v: np.ndarray, iters: int):
    """Warm-started power iteration; returns ``(sigma, u, v)``."""
    sigma = 0.0
    for _ in range(iters):
        wv = w @ v
        nu = np.linalg.norm(wv)
        if nu < _SIGMA_FLOOR:
            return 0.0, u, v
        u = wv / nu
        wtu = w.T @ u
        sigma = np.linalg.norm(wtu)
        if sigma < _SIGMA_FLOOR:
            return 0.0, u, v
        v = wtu / sigma
    return float(sigma), u, v


def spectral_normalize(p: MlpParams, s: SpectralState, iters: int = 1):
    """Divide every weight matrix by its estimated top singular value.

    Returns ``(normalized_params, new_state)``. Matrices whose estimate falls
    below ``1e-12`` are left as they are. Biases are untouched.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    weights, us, vs = [], [], []
    for w, u, v in zip(p.weights, s.u, s.v):
        sigma, u, v = power_iteration(w, u, v, iters)
        weights.append(w / sigma if sigma >= _SIGMA_FLOOR else w.copy())
        us.append(u)
        vs.append(v)
    return MlpParams(p.layer_dims, weights, [b.copy() for b in p.biases]), SpectralState(us, vs)


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def init(cls, p: MlpParams, beta1=0.9, beta2=0.999, epsilon=1e-8) -> "AdamState":
        return cls(
            [np.zeros_like(a) for a in p.arrays()], [np.zeros_like(a) for a in p.arrays()], 0, beta1, beta2, epsilon
        )


def adam_step(p: MlpParams, grads: MlpParams, st: AdamState, lr: float):
    """One bias-corrected Adam descent step; returns ``(params, state)``."""
    params, gs = p.arrays(), grads.arrays()
    if len(params) != len(gs) or any(a.shape != g.shape for a, g in zip(params, gs)):
        raise ValueError("gradient shapes do not match parameter shapes")
    if not all(np.all(np.isfinite(g)) for g in gs):
        raise ValueError("non-finite gradient entries")
    t = st.step_count + 1
    b1, b2, eps = st.beta1, st.beta2, st.epsilon
    new_params, new_m, new_v = [], [], []
    for a, g, m, v in zip(params, gs, st.m, st.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params.append(a - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return p.with_arrays(new_params), AdamState(new_m, new_v, t, b1, b2, eps)


# -- checkpoints --------------------------------------------------------------


def params_to_dict(p: MlpParams) -> dict:
    return {
        "layer_dims": list(p.layer_dims),
        "weights": [w.tolist() for w in p.weights],
        "biases": [b.tolist() for b in p.biases],
    }


def params_from_dict(d: dict) -> MlpParams:
    try:
        dims = _check_dims(d["layer_dims"])
        weights = [np.asarray(w, dtype=float).reshape(dims[i + 1], dims[i]) for i, w in enumerate(d["weights"])]
        biases = [np.asarray(b, dtype=float).reshape(dims[i + 1]) for i, b in enumerate(d["biases"])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed parameter checkpoint: {exc}") from exc
    p = MlpParams(tuple(dims), weights, biases)
    if not p.is_finite():
        raise ValueError("checkpoint contains non-finite entries")
    return p


def save_params(p: MlpParams, path) -> None:
    # json floats use repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(params_to_dict(p)))


def load_params(path) -> MlpParams:
    return params_from_dict(json.loads(Path(path).read_text()))
