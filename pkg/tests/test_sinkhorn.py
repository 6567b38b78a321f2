import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from geoseg.sinkhorn import SinkhornConfig, TransportPlan, plan_marginal_residual, solve


def naive_plan(cost: np.ndarray, sigma: float, iters: int = 10000, tol: float = 1e-14):
    """Independent fixed-point oracle: direct scaling in the exp domain.

    Deliberately written the textbook way (kernel matrix, u/v vectors) so
    it shares no code with the log-domain solver under test.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)
    kernel = np.exp(-cost / sigma)
    v = np.ones(m)
    u = np.ones(n)
    for _ in range(iters):
        u = a / (kernel @ v)
        v = b / (kernel.T @ u)
        plan = u[:, None] * kernel * v[None, :]
        residual = np.abs(plan.sum(axis=1) - a).sum() + np.abs(plan.sum(axis=0) - b).sum()
        if residual < tol:
            break
    return u[:, None] * kernel * v[None, :]


def test_one_by_one_is_the_unit_plan():
    for sigma in (0.05, 0.5, 3.0):
        result = solve(np.array([[7.0]]), SinkhornConfig(sigma=sigma))
        assert_allclose(result.plan, [[1.0]], atol=1e-15)


def test_constant_cost_gives_product_measure():
    result = solve(np.full((3, 4), 2.5))
    assert_allclose(result.plan, np.full((3, 4), 1.0 / 12.0), atol=1e-12)


def test_antidiagonal_cost_concentrates_on_cheap_pairs():
    result = solve(np.array([[0.0, 1.0], [1.0, 0.0]]), SinkhornConfig(sigma=0.05))
    expected = naive_plan(np.array([[0.0, 1.0], [1.0, 0.0]]), 0.05)
    assert_allclose(result.plan, expected, atol=1e-12)
    assert result.plan[0, 1] < 1e-8
    assert result.plan[1, 0] < 1e-8
    assert_allclose(np.diag(result.plan), [0.5, 0.5], atol=1e-8)


def test_random_cost_matches_oracle(rng):
    cost = rng.uniform(0.0, 1.0, size=(5, 3))
    result = solve(cost, SinkhornConfig(sigma=0.5, max_iters=2000, tol=1e-12))
    assert_allclose(result.plan, naive_plan(cost, 0.5), atol=1e-9, rtol=0)


def test_small_sigma_does_not_underflow(rng):
    # exp(-cost/sigma) alone would underflow to hard zeros here; the
    # log-domain path must still produce a valid coupling.
    cost = rng.uniform(0.0, 80.0, size=(6, 4))
    result = solve(cost, SinkhornConfig(sigma=0.01, max_iters=5000))
    assert np.all(result.plan >= 0.0)
    assert_allclose(result.plan.sum(), 1.0, atol=1e-9)


def test_reports_iterations_and_residual(rng):
    cost = rng.uniform(0.0, 1.0, size=(4, 4))
    result = solve(cost, SinkhornConfig(sigma=0.5, max_iters=2000, tol=1e-10))
    assert result.residual < 1e-10
    assert 1 <= result.iters_used <= 2000
    assert result.shape == (4, 4)
    # The stored residual is exactly the recomputed one.
    assert plan_marginal_residual(result) == pytest.approx(result.residual, abs=1e-15)


def test_nonconvergence_is_reported_not_raised(rng):
    cost = rng.uniform(0.0, 1.0, size=(8, 5))
    result = solve(cost, SinkhornConfig(sigma=0.05, max_iters=1, tol=1e-16))
    assert result.iters_used == 1
    assert result.residual > 0.0


def test_exact_product_plan_has_zero_residual():
    plan = TransportPlan(
        np.full((2, 3), 1.0 / 6.0), np.full(2, 0.5), np.full(3, 1.0 / 3.0), 0, 0.0
    )
    assert plan_marginal_residual(plan) == 0.0


def test_single_entry_perturbation_doubles_in_residual():
    eps = 1e-6
    base = np.full((2, 3), 1.0 / 6.0)
    base[0, 1] += eps
    plan = TransportPlan(base, np.full(2, 0.5), np.full(3, 1.0 / 3.0), 0, 0.0)
    assert plan_marginal_residual(plan) == pytest.approx(2.0 * eps, rel=1e-9)


def test_input_validation():
    with pytest.raises(ValueError):
        solve(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        solve(np.zeros(4))
    with pytest.raises(ValueError):
        solve(np.array([[np.inf, 0.0]]))
    with pytest.raises(ValueError):
        SinkhornConfig(sigma=0.0)
    with pytest.raises(ValueError):
        SinkhornConfig(max_iters=0)
    with pytest.raises(ValueError):
        SinkhornConfig(tol=-1.0)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(min_value=1, max_value=8),
    st.integers(min_value=1, max_value=8),
    st.sampled_from([0.05, 0.2, 1.0]),
    st.integers(min_value=0, max_value=2**31),
)
def test_plan_is_a_nonnegative_unit_mass_coupling(n, m, sigma, seed):
    cost = np.random.default_rng(seed).uniform(-2.0, 2.0, size=(n, m))
    result = solve(cost, SinkhornConfig(sigma=sigma, max_iters=500))
    assert np.all(result.plan >= 0.0)
    # The final column scaling pins column marginals regardless of
    # convergence, so total mass is always 1 up to float error.
    assert_allclose(result.plan.sum(), 1.0, atol=1e-9)
    assert_allclose(result.plan.sum(axis=0), np.full(m, 1.0 / m), atol=1e-9)
