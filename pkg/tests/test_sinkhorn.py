import numpy as np
import pytest
from hypothesis import given, strategies as st

from blackmamba.sinkhorn import constraint_residual, fast_init, gate_coefficients, route_top1, sinkhorn, _kernel


@given(st.integers(0, 10_000), st.sampled_from([(16, 4), (64, 8), (256, 8), (30, 3)]))
def test_converged_plan_meets_both_marginals(seed, shape):
    S, N = shape
    plan = sinkhorn(np.random.default_rng(seed).normal(size=shape))
    assert plan.converged
    assert np.abs(plan.pi.sum(axis=1) - 1).max() <= 1e-3
    assert np.abs(plan.pi.sum(axis=0) - S / N).max() <= 1e-3 * S / N
    assert plan.residual == pytest.approx(constraint_residual(plan.pi))


@given(st.integers(0, 10_000))
def test_fast_init_columns_sum_to_s_over_n_before_iterating(seed):
    L = np.random.default_rng(seed).normal(size=(40, 5))
    d0, d1 = fast_init(L)
    pi = _kernel(L, 2.0) * d0[None, :] * d1[:, None]
    np.testing.assert_allclose(pi.sum(axis=0), 40 / 5)


def test_literal_printed_init_does_not_normalize():
    L = np.random.default_rng(0).normal(size=(32, 4))
    d0, d1 = fast_init(L, form="literal")
    pi = _kernel(L, 2.0) * d0[None, :] * d1[:, None]
    assert constraint_residual(pi) > 0.5
    assert sinkhorn(L, init="literal").converged


@given(st.integers(0, 10_000))
def test_plan_invariant_to_row_and_column_shifts(seed):
    r = np.random.default_rng(seed)
    L = r.normal(size=(24, 4))
    shifted = L + r.normal(size=(24, 1)) + r.normal(size=(1, 4))
    a = sinkhorn(L, tol=1e-10, max_iters=5000)
    b = sinkhorn(shifted, tol=1e-10, max_iters=5000)
    np.testing.assert_allclose(a.pi, b.pi, atol=1e-7)


def test_top1_ties_go_to_lowest_index():
    assert route_top1(np.array([[0.5, 0.5], [0.2, 0.8], [0.3, 0.3]])).tolist() == [0, 1, 0]


def test_single_expert_routes_everything_to_it():
    plan = sinkhorn(np.random.default_rng(0).normal(size=(10, 1)))
    assert plan.converged and (plan.expert_of == 0).all()
    np.testing.assert_allclose(plan.pi, 1.0)


def test_iteration_budget_is_respected():
    plan = sinkhorn(np.random.default_rng(0).normal(size=(64, 8)) * 4, tol=1e-12, max_iters=3)
    assert plan.iters_used == 3 and not plan.converged


def test_rejects_bad_logits():
    with pytest.raises(ValueError):
        sinkhorn(np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError):
        sinkhorn(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        fast_init(np.zeros((2, 2)), form="bogus")


def test_gate_coefficients_are_sigmoid_of_chosen_logit():
    W = np.array([[1.0, 0.0], [0.0, 2.0]])
    x = np.array([[1.0, 1.0], [3.0, -1.0]])
    c = gate_coefficients(W, x, np.array([1, 0]))
    np.testing.assert_allclose(c, 1 / (1 + np.exp(-np.array([2.0, 3.0]))))
