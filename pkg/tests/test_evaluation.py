import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fppdrift.evaluation import (
    SinkhornConfig,
    Theorem4Params,
    coupled_error_experiment,
    discrete_bound,
    exact_w2_1d,
    mode_coverage,
    sinkhorn,
    sinkhorn_w2,
    sup_drift_gap,
    theorem4_bound,
)
from fppdrift.sde import ConstantDrift, LinearDrift, SampleBatch, SdeConfig, ShiftedDrift


def test_dirac_pair():
    assert sinkhorn_w2([[0.0]], [[3.0]]) == pytest.approx(3.0, rel=0.01)


def test_identical_batches_near_zero():
    x = np.random.default_rng(0).standard_normal((300, 2))
    scale = math.sqrt(np.mean(np.sum((x[:, None] - x[None]) ** 2, axis=-1)))
    assert sinkhorn_w2(x, x) <= 0.05 * scale


def test_1d_against_sorted_matching():
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.normal(rng.uniform(-2, 2), rng.uniform(0.5, 2), (200, 1))
        y = rng.normal(rng.uniform(-2, 2), rng.uniform(0.5, 2), (200, 1))
        exact = exact_w2_1d(x, y)
        assert abs(sinkhorn_w2(x, y) - exact) <= 0.05 * exact


def test_exact_1d_oracle():
    assert exact_w2_1d([[0.0], [1.0]], [[3.0], [2.0]]) == pytest.approx(2.0, rel=1e-15)


def test_symmetry():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((150, 2))
    y = rng.standard_normal((120, 2)) + [1.0, 0.5]
    cfg = SinkhornConfig(tol=1e-10, max_iters=5000)
    scale = math.sqrt(np.mean(np.sum((x[:, None] - y[None]) ** 2, axis=-1)))
    assert abs(sinkhorn_w2(x, y, cfg) - sinkhorn_w2(y, x, cfg)) <= 1e-8 * scale


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-50, 50), b=st.floats(-50, 50), c=st.floats(-100, 100))
def test_dirac_translation_covariance(a, b, c):
    if abs(a - b) < 1e-3:
        return
    v1 = sinkhorn_w2([[a]], [[b]])
    v2 = sinkhorn_w2([[a + c]], [[b + c]])
    assert v1 == pytest.approx(v2, abs=1e-10 * max(1.0, abs(a - b)))


def test_result_report_and_plan():
    rng = np.random.default_rng(3)
    res = sinkhorn(rng.standard_normal((40, 2)), rng.standard_normal((30, 2)), keep_plan=True)
    d = res.to_dict()
    assert {"metric", "value", "converged", "iters", "epsilon"} <= set(d)
    assert res.converged
    np.testing.assert_allclose(res.plan.sum(axis=0), 1 / 30, atol=1e-5)
    np.testing.assert_allclose(res.plan.sum(axis=1), 1 / 40, atol=1e-5)


def test_non_convergence_is_reported(caplog):
    rng = np.random.default_rng(4)
    res = sinkhorn(rng.standard_normal((50, 2)), rng.standard_normal((50, 2)) + 3, SinkhornConfig(max_iters=1, anneal=0.0))
    assert not res.converged
    assert math.isfinite(res.value) and res.violation > 0
    assert "marginal violation" in caplog.text


def test_sinkhorn_errors():
    with pytest.raises(ValueError):
        sinkhorn_w2(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        sinkhorn_w2(np.zeros((0, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        SinkhornConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        SinkhornConfig(tol=-1.0)


def test_explicit_epsilon_and_plain_mode():
    x = SampleBatch(0, np.array([[0.0], [1.0]]))
    y = SampleBatch(0, np.array([[0.0], [1.0]]) + 2.0)
    res = sinkhorn(x, y, SinkhornConfig(epsilon=1e-3, debias=False))
    assert res.epsilon == 1e-3 and not res.debiased
    assert res.value == pytest.approx(2.0, rel=1e-3)


def test_bound_examples():
    assert theorem4_bound(Theorem4Params(0.0, 1.0, 1.0, 1.0, 0.01, 0.0)) == pytest.approx(0.01, rel=1e-15)
    assert theorem4_bound(Theorem4Params(0.1, 1.0, 1e-9, 1.0, 1e-12, 0.0)) == pytest.approx(0.1, rel=1e-6)
    # 0.1 (e - 1) + 0.01
    assert theorem4_bound(Theorem4Params(0.1, 1.0, 1.0, 1.0, 0.01, 0.0)) == pytest.approx(0.18182818284590452, rel=1e-14)


def test_bound_validation():
    with pytest.raises(ValueError):
        Theorem4Params(-0.1, 1.0, 1.0, 1.0, 0.01)
    with pytest.raises(ValueError):
        Theorem4Params(0.1, 0.0, 1.0, 1.0, 0.01)
    with pytest.raises(ValueError):
        Theorem4Params(0.1, 1.0, 1.0, 1.0, 2.0)
    with pytest.raises(ValueError):
        Theorem4Params(0.1, 1.0, float("inf"), 1.0, 0.01)


def test_bound_monotone_on_grid():
    rng = np.random.default_rng(5)
    base_fields = ("eps_gen", "K", "L", "T", "dt", "ex0_sq")
    for _ in range(200):
        p = dict(eps_gen=rng.uniform(0, 1), K=rng.uniform(0.1, 3), L=rng.uniform(0.01, 3),
                 T=rng.uniform(1, 5), dt=rng.uniform(0.001, 0.5), ex0_sq=rng.uniform(0, 4))
        v = theorem4_bound(Theorem4Params(**p))
        for name in ("eps_gen", "K", "T", "dt", "ex0_sq"):
            q = dict(p)
            q[name] = p[name] * 1.5 + 0.01
            if q["dt"] > q["T"]:
                continue
            assert theorem4_bound(Theorem4Params(**q)) > v, name
    assert set(base_fields) == set(Theorem4Params.__dataclass_fields__)


def test_discrete_bound_partial_sum():
    assert discrete_bound(0.1, 2.0, 0.5, 3) == pytest.approx(0.1 * 0.5 * (1 + 2 + 4), rel=1e-15)
    # pre-limit form never exceeds the closed form
    for L in (0.1, 1.0, 4.0):
        assert discrete_bound(0.05, L, 0.01, 100) <= 0.05 / L * math.expm1(L * 1.0)


def test_sup_drift_gap_constant_shift():
    g = LinearDrift(np.array([1.0, 2.0]), np.zeros(2))
    gf = ShiftedDrift(g, np.array([0.03, 0.04]))
    assert sup_drift_gap(g, gf, [-1, -1], [1, 1], 11) == pytest.approx(0.05, rel=1e-12)


def test_coupled_identical_drifts_zero_error():
    g = LinearDrift(np.array([4.0, 1.0]), np.array([-3.0, -3.0]))
    res = coupled_error_experiment(g, g, SdeConfig(1.0, 0.01, 100, seed=1), 500, L=4.0, dim=2)
    assert res.empirical_error == 0.0 and res.eps_gen == 0.0


def test_coupled_constant_shift_matches_recurrence():
    # with common noise the gap follows e_{i+1} = (1 - A dt) e_i + c dt exactly
    A = np.array([4.0, 1.0])
    g = LinearDrift(A, np.array([-3.0, -3.0]))
    c = np.array([0.05, 0.0])
    cfg = SdeConfig(1.0, 0.01, 100, seed=2)
    res = coupled_error_experiment(g, ShiftedDrift(g, c), cfg, 200, L=4.0, dim=2)
    e = np.zeros(2)
    for _ in range(100):
        e = (1 - A * cfg.dt) * e + c * cfg.dt
    assert res.empirical_error == pytest.approx(np.linalg.norm(e), rel=1e-9)
    assert res.empirical_error <= res.discrete_bound <= res.bound


def test_coupled_sigma_zero_error_recurrence():
    # deterministic check of e_{i+1} <= (1 + L dt) e_i + eps dt entrywise
    A = np.array([2.0, 0.5])
    g = LinearDrift(A, np.array([1.0, -1.0]))
    gf = ShiftedDrift(LinearDrift(A * 1.1, np.array([1.0, -1.0])), np.array([0.02, -0.01]))
    cfg = SdeConfig(0.0, 0.02, 50, seed=0)
    x0 = np.random.default_rng(0).uniform(-1, 1, (30, 2))
    res = coupled_error_experiment(g, gf, cfg, 30, L=2.2, x0=x0)
    errs = res.errors_per_step
    for i in range(50):
        assert errs[i + 1] <= (1 + res.L * cfg.dt) * errs[i] + res.eps_gen * cfg.dt + 1e-15


def test_coupled_requires_start():
    g = ConstantDrift(np.zeros(2))
    with pytest.raises(ValueError):
        coupled_error_experiment(g, g, SdeConfig(1.0, 0.1, 5), 10, L=1.0)


def test_mode_coverage_examples():
    means = [[0.0, 0.0], [10.0, 10.0]]
    np.testing.assert_array_equal(mode_coverage(np.zeros((5, 2)), means), [1.0, 0.0])
    rng = np.random.default_rng(6)
    pts = np.vstack([rng.normal(0, 1, (500, 2)), rng.normal(10, 1, (500, 2))])
    np.testing.assert_allclose(mode_coverage(pts, means), [0.5, 0.5], atol=1e-12)
    assert mode_coverage(np.array([[0.0, 0.0], [5.0, 0.0]]), means, radius=1.0).sum() == 0.5
    with pytest.raises(ValueError):
        mode_coverage(np.zeros((0, 2)), means)
    with pytest.raises(ValueError):
        mode_coverage(np.zeros((3, 2)), [])
