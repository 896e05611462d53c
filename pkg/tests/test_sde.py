import numpy as np
import pytest

from fppdrift.nn_core import mlp_forward, mlp_init
from fppdrift.sde import (
    ConstantDrift,
    LinearDrift,
    SampleBatch,
    SdeConfig,
    SdeDivergence,
    ZeroDrift,
    as_drift,
    euler_step,
    noise_generator,
    rollout,
    rollout_diff,
    simulate_path,
)


def test_config_validation():
    with pytest.raises(ValueError):
        SdeConfig(-1.0, 0.1, 10)
    with pytest.raises(ValueError):
        SdeConfig(1.0, 0.0, 10)
    with pytest.raises(ValueError):
        SdeConfig(1.0, 0.1, 0)
    with pytest.raises(ValueError):
        SdeConfig(float("nan"), 0.1, 1)
    assert SdeConfig(1.0, 0.01, 200).horizon == pytest.approx(2.0, rel=1e-15)


def test_sample_batch_validation():
    with pytest.raises(ValueError):
        SampleBatch(0, np.zeros((0, 2)))
    with pytest.raises(ValueError):
        SampleBatch(0, np.array([[1.0, np.inf]]))
    b = SampleBatch(3, np.zeros((5, 2)))
    assert (b.n, b.dim, b.time_index) == (5, 2, 3)


def test_euler_zero_drift_no_noise():
    x = np.array([0.3, -1.2])
    out = euler_step(x, ZeroDrift(), SdeConfig(0.0, 0.1, 1), np.array([5.0, -5.0]))
    assert np.array_equal(out, x)


def test_euler_constant_drift():
    out = euler_step(np.zeros(2), ConstantDrift(np.array([1.0, 2.0])), SdeConfig(0.0, 0.1, 1), np.zeros(2))
    np.testing.assert_allclose(out, [0.1, 0.2], rtol=1e-15)


def test_euler_formula_with_noise():
    x = np.array([[1.0, 2.0], [-0.5, 0.25]])
    noise = np.array([[0.3, -1.1], [2.0, 0.0]])
    g = LinearDrift(np.array([4.0, 1.0]), np.array([-3.0, -3.0]))
    cfg = SdeConfig(0.7, 0.02, 1)
    expected = x - (np.array([4.0, 1.0]) * x - 3.0) * 0.02 + 0.7 * np.sqrt(0.02) * noise
    np.testing.assert_allclose(euler_step(x, g, cfg, noise), expected, rtol=1e-15)


def test_euler_divergence_names_dimension():
    g = ConstantDrift(np.array([0.0, 1e12]))
    with pytest.raises(SdeDivergence) as info:
        euler_step(np.zeros(2), g, SdeConfig(0.0, 1.0, 1), np.zeros(2), step=4)
    assert info.value.dim == 1 and info.value.step == 4
    assert "dimension 1" in str(info.value)


def test_rollout_divergence_reports_step():
    g = lambda x: 10.0 * x
    x0 = SampleBatch(0, np.ones((3, 1)))
    with pytest.raises(SdeDivergence) as info:
        rollout(x0, g, SdeConfig(0.0, 1.0, 50), [50])
    # 11^k exceeds 1e8 first at k = 8
    assert info.value.step == 8


def test_ou_stationary_moments():
    # drift -(4x - 3): stationary mean 3/4 and variance sigma^2/(2*4) = 1/8
    n = 10_000
    cfg = SdeConfig(1.0, 0.01, 2000, seed=11)
    x0 = SampleBatch(0, np.zeros((n, 1)))
    end = rollout(x0, LinearDrift(np.array([4.0]), np.array([-3.0])), cfg, [2000])[0].points[:, 0]
    mean_se = np.sqrt(0.125 / n)
    var_se = 0.125 * np.sqrt(2.0 / (n - 1))
    assert abs(end.mean() - 0.75) <= 3 * mean_se
    assert abs(end.var(ddof=1) - 0.125) <= 3 * var_se


def test_brownian_covariance():
    n, steps, dt, sigma = 10_000, 50, 0.02, 0.8
    x0 = SampleBatch(0, np.zeros((n, 2)))
    end = rollout(x0, ZeroDrift(), SdeConfig(sigma, dt, steps, seed=5), [steps])[0].points
    target = sigma**2 * steps * dt
    cov = np.cov(end.T)
    se = target * np.sqrt(2.0 / (n - 1))
    assert abs(cov[0, 0] - target) <= 3 * se and abs(cov[1, 1] - target) <= 3 * se
    assert abs(cov[0, 1]) <= 3 * target / np.sqrt(n - 1)


def test_rollout_record_zero_is_x0():
    x0 = SampleBatch(4, np.arange(6.0).reshape(3, 2))
    out = rollout(x0, ZeroDrift(), SdeConfig(1.0, 0.1, 5), [0])
    assert out[0] is x0


def test_rollout_linear_matches_scalar_recurrence():
    A, B, dt = np.array([4.0, 1.0]), np.array([-3.0, -3.0]), 0.01
    pts = np.array([[0.5, -1.0], [2.0, 7.0], [-3.0, 0.0]])
    out = rollout(SampleBatch(0, pts), LinearDrift(A, B), SdeConfig(0.0, dt, 30), [10, 30])
    for k, snap in zip((10, 30), out):
        for i in range(3):
            for d in range(2):
                v = pts[i, d]
                for _ in range(k):
                    v = v - (A[d] * v + B[d]) * dt
                assert snap.points[i, d] == pytest.approx(v, abs=1e-12)
        assert snap.time_index == k


def test_rollout_deterministic_and_seed_sensitive():
    x0 = SampleBatch(0, np.zeros((20, 2)))
    cfg = SdeConfig(1.0, 0.1, 10, seed=3)
    a = rollout(x0, ZeroDrift(), cfg, [5, 10])
    b = rollout(x0, ZeroDrift(), cfg, [5, 10])
    c = rollout(x0, ZeroDrift(), SdeConfig(1.0, 0.1, 10, seed=4), [5, 10])
    assert all(np.array_equal(x.points, y.points) for x, y in zip(a, b))
    assert not np.array_equal(a[1].points, c[1].points)


def test_rollout_record_validation():
    x0 = SampleBatch(0, np.zeros((2, 1)))
    cfg = SdeConfig(1.0, 0.1, 5)
    with pytest.raises(ValueError):
        rollout(x0, ZeroDrift(), cfg, [3, 1])
    with pytest.raises(ValueError):
        rollout(x0, ZeroDrift(), cfg, [6])


def test_consecutive_steps_replay_recurrence():
    # every step satisfies the Euler recurrence given the noise replayed from the seed
    g = LinearDrift(np.array([1.5, 0.5]), np.array([0.2, -0.1]))
    cfg = SdeConfig(0.9, 0.05, 12, seed=21)
    x0 = np.random.default_rng(0).standard_normal((8, 2))
    path = simulate_path(x0, g, cfg)
    rng = noise_generator(cfg.seed)
    for s in range(1, 13):
        noise = rng.standard_normal(x0.shape)
        np.testing.assert_array_equal(path[s], euler_step(path[s - 1], g, cfg, noise))


def test_as_drift_accepts_params_and_callables():
    p = mlp_init([2, 4, 2], 0)
    x = np.ones((3, 2))
    np.testing.assert_array_equal(as_drift(p)(x), mlp_forward(p, x))
    np.testing.assert_array_equal(as_drift(lambda y: 2 * y)(x), 2 * x)
    with pytest.raises(TypeError):
        as_drift(3.0)


def _loss_through_rollout(p, x0, cfg, cot):
    snaps = rollout(x0, p, cfg, [cfg.n_steps])
    return float(np.sum(cot * snaps[-1].points))


def test_rollout_diff_one_step_gradient():
    # one step, loss = first coordinate of one particle -> dt * dg_1/dw at x0
    p = mlp_init([2, 3, 2], 1)
    x0 = SampleBatch(0, np.array([[0.4, -0.7]]))
    cfg = SdeConfig(0.5, 0.1, 1, seed=2)
    _, ctx = rollout_diff(x0, p, cfg, [1])
    cot = np.array([[1.0, 0.0]])
    grads = ctx.backprop({1: cot}).flat()
    flat, h = p.flat(), 1e-6
    for i in range(len(flat)):
        e = np.zeros_like(flat)
        e[i] = h
        g1 = lambda q: mlp_forward(q, x0.points[0])[0]
        fd = 0.1 * (g1(p.from_flat(flat + e)) - g1(p.from_flat(flat - e))) / (2 * h)
        assert grads[i] == pytest.approx(fd, rel=1e-5, abs=1e-11)


def test_rollout_diff_no_steps_zero_gradient():
    p = mlp_init([2, 3, 2], 1)
    x0 = SampleBatch(0, np.ones((4, 2)))
    snaps, ctx = rollout_diff(x0, p, SdeConfig(1.0, 0.1, 5), [0])
    assert snaps[0] is x0
    assert np.all(ctx.backprop({0: np.ones((4, 2))}).flat() == 0)
    assert np.all(ctx.backprop({}).flat() == 0)


def test_rollout_diff_pathwise_gradient_five_steps():
    rng = np.random.default_rng(3)
    p = mlp_init([2, 4, 2], 3)
    p = p.with_arrays([a + 0.2 * rng.standard_normal(a.shape) for a in p.arrays()])
    x0 = SampleBatch(0, rng.standard_normal((6, 2)))
    cfg = SdeConfig(0.8, 0.1, 5, seed=9)
    cot = rng.standard_normal((6, 2))
    _, ctx = rollout_diff(x0, p, cfg, [5])
    grads = ctx.backprop({5: cot}).flat()
    flat, h = p.flat(), 1e-6
    # every parameter of this small net (spot checks cover all 22 of them)
    for i in range(len(flat)):
        e = np.zeros_like(flat)
        e[i] = h
        fd = (_loss_through_rollout(p.from_flat(flat + e), x0, cfg, cot)
              - _loss_through_rollout(p.from_flat(flat - e), x0, cfg, cot)) / (2 * h)
        assert grads[i] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_rollout_diff_matches_rollout():
    p = mlp_init([2, 8, 2], 5)
    x0 = SampleBatch(2, np.random.default_rng(1).standard_normal((10, 2)))
    cfg = SdeConfig(1.0, 0.05, 7, seed=13)
    a = rollout(x0, p, cfg, [0, 3, 7])
    b, _ = rollout_diff(x0, p, cfg, [0, 3, 7])
    for x, y in zip(a, b):
        assert np.array_equal(x.points, y.points) and x.time_index == y.time_index


def test_rollout_diff_requires_neural_drift():
    with pytest.raises(TypeError):
        rollout_diff(SampleBatch(0, np.zeros((1, 2))), ZeroDrift(), SdeConfig(1.0, 0.1, 1), [1])
