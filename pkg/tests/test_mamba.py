import numpy as np
import pytest
from hypothesis import given, strategies as st

from blackmamba import tensor as T
from blackmamba.checks import random_mamba
from blackmamba.mamba import (MambaState, compose, discretize, forward_sequence, forward_streaming, inject_fault,
                              scan_associative, scan_sequential, state_nbytes, step)


@given(st.integers(0, 10_000), st.integers(1, 40))
def test_every_scan_matches_streaming(seed, length):
    p = random_mamba(seed)
    x = np.random.default_rng(seed).normal(size=(length, p.d_model))
    ref = forward_streaming(p, x)
    for method in ("fused", "sequential", "associative"):
        np.testing.assert_allclose(forward_sequence(p, x, scan=method).data, ref, rtol=0, atol=1e-10)


@given(st.integers(0, 10_000), st.integers(1, 70))
def test_associative_scan_matches_sequential(seed, length):
    r = np.random.default_rng(seed)
    dA = r.uniform(0, 1, size=(length, 3, 2))
    dBx = r.normal(size=(length, 3, 2))
    np.testing.assert_allclose(scan_associative(dA, dBx), scan_sequential(dA, dBx), rtol=1e-12, atol=1e-12)


@given(st.integers(0, 10_000))
def test_compose_is_associative(seed):
    r = np.random.default_rng(seed)
    a, b, c = [(r.uniform(0, 1, 3), r.normal(size=3)) for _ in range(3)]
    left = compose(compose(c, b), a)
    right = compose(c, compose(b, a))
    for u, v in zip(left, right):
        np.testing.assert_allclose(u, v, rtol=1e-12)


def test_discretize_matches_hand_values():
    ln_A = np.log(np.array([[1.0, 2.0]]))
    B = np.array([0.5, -1.0])
    dt, dA, dB = discretize(ln_A, B, np.array([0.0]), 0.0)
    assert np.isclose(dt[0], np.log(2.0))
    np.testing.assert_allclose(dA[0], [0.5, 0.25])
    np.testing.assert_allclose(dB[0], np.log(2.0) * B)


def test_zero_dt_freezes_state_bitwise():
    p = random_mamba(3)
    s = MambaState.zeros(p)
    r = np.random.default_rng(0)
    for _ in range(4):
        _, s = step(p, s, r.normal(size=p.d_model))
    _, s2 = step(p, s, r.normal(size=p.d_model), force_dt=0.0)
    assert np.array_equal(s.h, s2.h)


def test_state_bytes_are_position_constant():
    p = random_mamba(5)
    s = MambaState.zeros(p)
    sizes = set()
    for t in range(12):
        _, s = step(p, s, np.ones(p.d_model))
        sizes.add(s.nbytes)
    assert sizes == {state_nbytes(p.d_inner, p.d_state, p.conv_width, 8)}


def test_sequence_output_is_causal():
    p = random_mamba(11)
    x = np.random.default_rng(0).normal(size=(10, p.d_model))
    y = forward_sequence(p, x).data
    x[6:] += 5.0
    np.testing.assert_array_equal(forward_sequence(p, x).data[:6], y[:6])


def test_injected_fault_breaks_step_only():
    p = random_mamba(2)
    x = np.random.default_rng(0).normal(size=(8, p.d_model))
    good = forward_streaming(p, x)
    with inject_fault("flip_dA_sign"):
        bad = forward_streaming(p, x)
        seq = forward_sequence(p, x).data
    assert np.abs(bad - good).max() > 1e-3
    np.testing.assert_allclose(seq, good, atol=1e-12)
    with pytest.raises(ValueError):
        with inject_fault("no-such-fault"):
            pass


def test_step_rejects_wrong_shape():
    p = random_mamba(0)
    with pytest.raises(T.ShapeError):
        step(p, MambaState.zeros(p), np.zeros(p.d_model + 1))


def test_mamba_block_gradient_matches_finite_difference():
    from blackmamba.checks import grad_cases, gradient_errors
    fn, tensors = grad_cases(4)["mamba block"]
    assert gradient_errors(fn, tensors, n_coords=60, seed=4)["max_rel_err"] < 1e-4
