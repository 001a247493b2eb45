import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fsmirl import _accel
from fsmirl import hsic as H
from fsmirl.hsic import (DependenceReport, WeightConfig, WeightOptimizationError, all_pairs,
                         apply_weights, dependence_objective, hsic_biased, hsic_scaled,
                         objective_grad_analytic, objective_grad_fd, optimize_weights,
                         project_weights, total_dependence, weighted_hsic)
from fsmirl.kernels import KRONECKER, KernelSpec, gram

GAUSS = KernelSpec("gaussian")


def trace_oracle(kx, ky):
    # Tr(Kx J Ky J) expanded entrywise, J_ab = delta_ab - 1/n
    n = len(kx)
    J = [[(1.0 if a == b else 0.0) - 1.0 / n for b in range(n)] for a in range(n)]
    t = 0.0
    for a in range(n):
        for b in range(n):
            for c in range(n):
                if J[b][c] == 0:
                    continue
                for d in range(n):
                    t += kx[a][b] * J[b][c] * ky[c][d] * J[d][a]
    return t


def double_sum_oracle(kx, ky):
    n = len(kx)
    s1 = sum(kx[i][j] * ky[i][j] for i in range(n) for j in range(n)) / n ** 2
    s2 = sum(map(sum, kx)) * sum(map(sum, ky)) / n ** 4
    s3 = sum(sum(kx[i]) * sum(ky[i]) for i in range(n)) * 2 / n ** 3
    return s1 + s2 - s3


def _sym(rng, n):
    a = rng.random((n, n))
    return (a + a.T) / 2


def test_hsic_constant_column_zero():
    kx = gram(GAUSS, np.random.default_rng(0).normal(size=6))
    ky = gram(GAUSS, np.ones(6))
    assert abs(hsic_biased(kx, ky)) < 1e-15
    assert abs(hsic_scaled(kx, ky)) < 1e-15


def test_hsic_identity_2x2():
    I2 = gram(KRONECKER, [0, 1])
    assert hsic_biased(I2, I2) == pytest.approx(0.25, abs=1e-15)
    assert hsic_scaled(I2, I2) == pytest.approx(1.0, abs=1e-15)


def test_hsic_matches_loop_oracle():
    rng = np.random.default_rng(4)
    kx, ky = _sym(rng, 8), _sym(rng, 8)
    assert abs(hsic_biased(kx, ky) - trace_oracle(kx.tolist(), ky.tolist()) / 64) < 1e-10


def test_hsic_errors():
    with pytest.raises(ValueError):
        hsic_biased(np.eye(2), np.eye(3))
    with pytest.raises(ZeroDivisionError):
        hsic_scaled(np.eye(1), np.eye(1))


def test_scaled_ratio():
    rng = np.random.default_rng(9)
    for _ in range(20):
        n = int(rng.integers(2, 12))
        kx, ky = _sym(rng, n), _sym(rng, n)
        assert hsic_scaled(kx, ky) == pytest.approx(hsic_biased(kx, ky) * n ** 2 / (n - 1) ** 2,
                                                    rel=1e-12, abs=1e-15)


@given(arrays(np.float64, st.tuples(st.integers(2, 10), st.just(2)),
              elements=st.floats(-5, 5, allow_nan=False)),
       st.sampled_from(["kronecker", "gaussian"]))
def test_hsic_symmetric_nonnegative(x, kind):
    if kind == "kronecker":
        x = np.round(x)
    kx, ky = gram(KernelSpec(kind), x[:, 0]), gram(KernelSpec(kind), x[:, 1])
    assert hsic_biased(kx, ky) == hsic_biased(ky, kx)
    assert hsic_biased(kx, ky) >= -1e-10
    if kind == "kronecker":
        assert abs(hsic_biased(kx, ky) - double_sum_oracle(kx.tolist(), ky.tolist())) < 1e-10


def test_weighted_hsic_identity_weights():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=30), rng.normal(size=30)
    assert weighted_hsic(np.ones(30), a, b) == hsic_scaled(gram(GAUSS, a), gram(GAUSS, b))


def test_weighted_hsic_collapsed():
    n = 6
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=n), rng.normal(size=n)
    w = np.zeros(n)
    w[0] = n
    za, zb = w * a, w * b
    # median pairwise distance is 0 (most pairs are zero-zero), so bandwidth falls back to 1
    K = [[math.exp(-(za[i] - za[j]) ** 2 / 2) for j in range(n)] for i in range(n)]
    L = [[math.exp(-(zb[i] - zb[j]) ** 2 / 2) for j in range(n)] for i in range(n)]
    want = trace_oracle(K, L) / (n - 1) ** 2
    assert weighted_hsic(w, a, b) == pytest.approx(want, abs=1e-12)


def test_weighted_hsic_scale_invariant():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=40), rng.normal(size=40)
    w = rng.random(40) * 2
    assert abs(weighted_hsic(w, 2 * a, b) - weighted_hsic(w, a, b)) < 1e-10


def test_weighted_hsic_length_mismatch():
    with pytest.raises(ValueError):
        weighted_hsic(np.ones(3), np.ones(4), np.ones(4))


def test_total_dependence_single_pair():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(25, 2))
    rep = total_dependence(np.ones(25), X, [(0, 1)])
    assert rep.total == weighted_hsic(np.ones(25), X[:, 0], X[:, 1])
    assert rep.values == [rep.total]


def test_total_dependence_errors():
    X = np.zeros((5, 3))
    with pytest.raises(ValueError, match="empty"):
        total_dependence(np.ones(5), X, [])
    with pytest.raises(ValueError):
        total_dependence(np.ones(5), X, [(1, 0)])
    with pytest.raises(ValueError):
        total_dependence(np.ones(5), X, [(0, 3)])


def test_report_invariants_and_json():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(20, 4))
    pairs = all_pairs(4)
    rep = total_dependence(rng.random(20) * 2, X, pairs)
    assert all(v >= -1e-8 for v in rep.values)
    assert rep.total == pytest.approx(sum(rep.values), abs=0)
    back = DependenceReport.from_json(rep.to_json())
    assert back.total == rep.total and back.values == rep.values
    assert [tuple(p) for p in back.pairs] == [tuple(p) for p in rep.pairs]
    assert json.loads(rep.to_json())["pairs"][0] == [0, 1]


def _perm_null(a, b, rng, shuffles=200):
    ka = gram(GAUSS, a)
    return np.array([hsic_scaled(ka, gram(GAUSS, b[rng.permutation(b.size)]))
                     for _ in range(shuffles)])


def test_total_dependence_permutation_signal():
    rng = np.random.default_rng(10)
    n = 200
    X = rng.choice([-1.0, 1.0], size=(n, 2))
    null = _perm_null(X[:, 0], X[:, 1], rng)
    v = total_dependence(np.ones(n), X, [(0, 1)]).total
    assert abs(v - null.mean()) <= 3 * null.std()
    dup = np.column_stack([X[:, 0], X[:, 0]])
    assert total_dependence(np.ones(n), dup, [(0, 1)]).total > np.quantile(null, 0.99)


def test_fast_objective_matches_reference():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(30, 5))
    w = rng.random(30) * 2
    pairs = all_pairs(5)
    assert dependence_objective(w, X, pairs) == pytest.approx(
        total_dependence(w, X, pairs).total, rel=1e-12)


def test_analytic_gradient_matches_fd():
    rng = np.random.default_rng(13)
    X = rng.normal(size=(24, 4))
    X[:, 1] = X[:, 0] + 0.3 * rng.normal(size=24)
    w = project_weights(1 + 0.2 * rng.normal(size=24))
    pairs = all_pairs(4)
    _, ga = objective_grad_analytic(w, X, pairs)
    # a small step keeps the differences off the median-bandwidth switch points
    _, gf = objective_grad_fd(w, X, pairs, h=1e-5)
    assert np.max(np.abs(ga - gf)) / np.max(np.abs(gf)) < 1e-4


def test_hsic_backends_agree():
    rng = np.random.default_rng(14)
    Z = rng.normal(size=(17, 4))
    bw = rng.random(4) + 0.5
    pairs = all_pairs(4)
    np.testing.assert_allclose(_accel.hsic_pairs_nb(Z, bw, pairs),
                               _accel.hsic_pairs_np(Z, bw, pairs), rtol=1e-12, atol=1e-15)
    a = _accel.hsic_pairs_grad_nb(Z, bw, pairs)
    b = _accel.hsic_pairs_grad_np(Z, bw, pairs)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-14)



@pytest.mark.parametrize("n", [2, 3, 4, 9, 120])
def test_pair_median_backends_agree(n):
    rng = np.random.default_rng(n)
    for z in (rng.normal(size=n), rng.integers(0, 3, size=n).astype(float), np.zeros(n)):
        lo, hi, uv = _accel.pair_median_nb(z)
        lo2, hi2, _ = _accel.pair_median_np(z)
        assert (lo, hi) == (lo2, hi2)
        d = sorted(abs(z[u] - z[v]) for u in range(n) for v in range(u + 1, n))
        m = len(d)
        assert (lo, hi) == ((d[m // 2], d[m // 2]) if m % 2 else (d[m // 2 - 1], d[m // 2]))
        assert abs(z[uv[0, 0]] - z[uv[0, 1]]) == lo and abs(z[uv[1, 0]] - z[uv[1, 1]]) == hi

@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(0, 10)))
def test_projection_feasible_and_idempotent(w):
    p = project_weights(w)
    if not np.any(w > 0):
        assert p is None
        return
    n = w.size
    assert np.all(p >= 0) and np.all(p <= n)
    assert abs(p.sum() - n) <= 1e-9 * n
    np.testing.assert_allclose(project_weights(p), p, atol=1e-12, rtol=0)


def test_optimize_zero_lr_returns_ones():
    X = np.random.default_rng(0).normal(size=(4, 2))
    res = optimize_weights(X, WeightConfig(steps=1, learning_rate=0.0))
    np.testing.assert_array_equal(res.weights, np.ones(4))


def test_optimize_preconditions():
    with pytest.raises(ValueError):
        optimize_weights(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        optimize_weights(np.zeros((8, 1)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_optimize_independent_columns_stay_near_one(seed):
    X = np.random.default_rng([seed, 77]).normal(size=(300, 6))
    res = optimize_weights(X, WeightConfig(seed=seed, gradient="analytic"))
    assert np.max(np.abs(res.weights - 1)) <= 0.2


def test_optimize_weights_feasible_and_not_worse():
    rng = np.random.default_rng(21)
    X = rng.normal(size=(60, 5))
    X[:30, 1] = X[:30, 0]
    res = optimize_weights(X, WeightConfig(steps=10, gradient="fd"))
    w = res.weights
    assert np.all(w >= 0) and np.all(w <= 60) and abs(w.sum() - 60) < 1e-9
    assert min(res.heldout_trace) <= res.heldout_trace[0]
    assert dependence_objective(w, X, all_pairs(5)) <= res.heldout_trace[0] + 1e-12


def test_divergence_flag(monkeypatch):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(12, 3))
    calls = iter(np.linspace(1.0, 3.0, 200))
    monkeypatch.setattr(H, "dependence_objective", lambda w, X, p: float(next(calls)))
    res = optimize_weights(X, WeightConfig(steps=15, gradient="analytic"))
    assert res.diverged


def test_projection_failure_resets_then_aborts(monkeypatch):
    X = np.random.default_rng(2).normal(size=(8, 2))
    monkeypatch.setattr(H, "objective_grad_analytic", lambda w, X, p: (1.0, np.full(w.size, 1e9)))
    with pytest.raises(WeightOptimizationError):
        optimize_weights(X, WeightConfig(steps=10, gradient="analytic"))

    state = {"k": 0}

    def once_bad(w, X, p):
        state["k"] += 1
        return 1.0, np.full(w.size, 1e9 if state["k"] == 1 else 0.0)

    monkeypatch.setattr(H, "objective_grad_analytic", once_bad)
    res = optimize_weights(X, WeightConfig(steps=3, gradient="analytic"))
    assert res.resets == 1


def test_nonfinite_objective_aborts(monkeypatch):
    X = np.random.default_rng(3).normal(size=(8, 2))
    monkeypatch.setattr(H, "objective_grad_analytic", lambda w, X, p: (np.nan, np.zeros(w.size)))
    with pytest.raises(WeightOptimizationError):
        optimize_weights(X, WeightConfig(steps=2, gradient="analytic"))


def test_apply_weights_examples():
    losses = np.array([0.5, 1.5, 2.0, 4.0])
    assert apply_weights(np.ones(4), losses) == losses.mean()
    assert apply_weights(np.array([4.0, 0, 0, 0]), losses) == 0.5
    rng = np.random.default_rng(0)
    w, l = rng.random(9), rng.random(9)
    want = 0.0
    for a, b in zip(w, l):
        want += a * b
    assert apply_weights(w, l) == pytest.approx(want / 9, abs=1e-12)
    with pytest.raises(ValueError):
        apply_weights(np.ones(3), np.ones(4))
