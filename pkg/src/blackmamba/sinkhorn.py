"""Sinkhorn routing: doubly-constrained normalisation of router logits.

For ``S`` samples and ``N`` experts the plan ``pi[a, i] = K[a, i] * d0[i] * d1[a]``
with ``K = exp(temperature * logits)`` is driven towards

* ``sum_i pi[a, i] = 1``     for every sample ``a``;
* ``sum_a pi[a, i] = S / N`` for every expert ``i``.

One iteration rescales the samples (``d1``) and then the experts (``d0``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import np_sigmoid

INIT_MODES = ("fast", "uniform", "literal")


@dataclass
class RoutePlan:
    pi: np.ndarray
    expert_of: np.ndarray
    coeff: np.ndarray | None
    iters_used: int
    residual: float
    converged: bool


def _kernel(logits: np.ndarray, temperature: float) -> np.ndarray:
    """``exp(t*L)`` divided by its largest entry (the factors absorb the shift)."""
    scaled = temperature * logits
    return np.exp(scaled - scaled.max())


def constraint_residual(pi: np.ndarray) -> float:
    """Max relative violation over both constraint families."""
    S, N = pi.shape
    row = np.abs(pi.sum(axis=1) - 1.0).max()
    col = np.abs(pi.sum(axis=0) - S / N).max() / (S / N)
    return float(max(row, col))


def fast_init(logits: np.ndarray, temperature: float = 2.0, form: str = "fast"):
    """Initial scaling factors ``(d0, d1)`` for the fixed-point loop.

    ``"fast"`` makes every expert column a softmax over samples scaled to
    ``S/N``, so the per-expert balance holds before any iteration.
    ``"literal"`` is ``d0 = 1, d1[a] = (S/N) * sum_i K[a, i]`` as printed.
    ``"uniform"`` is ``d0 = 1, d1 = 1/N``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    S, N = logits.shape
    K = _kernel(logits, temperature)
    if form == "fast":
        return (S / N) / K.sum(axis=0), np.ones(S)
    if form == "literal":
        return np.ones(N), (S / N) * K.sum(axis=1)
    if form == "uniform":
        return np.ones(N), np.full(S, 1.0 / N)
    raise ValueError(f"unknown init {form!r}; expected one of {INIT_MODES}")


def route_top1(pi: np.ndarray) -> np.ndarray:
    """Highest-probability expert per row; ties go to the lowest index."""
    return np.argmax(np.asarray(pi), axis=-1)


def gate_coefficients(router_weight: np.ndarray, x: np.ndarray, expert_of: np.ndarray) -> np.ndarray:
    """``sigmoid(W_r[e] . x)`` for the chosen expert ``e`` of every sample.

    ``router_weight`` is ``(N, D)``. This numpy version carries no gradient;
    the MoE layer recomputes it on the tape.
    """
    W = np.asarray(router_weight)
    x = np.asarray(x)
    chosen = np.einsum("sd,sd->s", x, W[expert_of])
    return np_sigmoid(chosen)


def sinkhorn(logits, temperature: float = 2.0, init: str = "fast", tol: float = 1e-3,
             max_iters: int = 100) -> RoutePlan:
    """Solve the two-sided normalisation by alternating rescaling.

    Returns the plan after convergence (residual <= ``tol``) or after
    ``max_iters`` iterations with ``converged=False``.
    """
    L = np.asarray(logits, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] < 1 or L.shape[1] < 1:
        raise ValueError(f"logits must be a non-empty (S, N) matrix, got shape {L.shape}")
    if not np.all(np.isfinite(L)):
        raise ValueError("router logits contain non-finite values")
    S, N = L.shape
    K = _kernel(L, temperature)
    d0, d1 = fast_init(L, temperature, init)
    target = S / N

    def plan():
        return K * d0[None, :] * d1[:, None]

    pi = plan()
    residual = constraint_residual(pi)
    iters = 0
    while residual > tol and iters < max_iters:
        d1 = 1.0 / (K @ d0)
        d0 = target / (K.T @ d1)
        iters += 1
        pi = plan()
        residual = constraint_residual(pi)
    return RoutePlan(pi=pi, expert_of=route_top1(pi), coeff=None, iters_used=iters,
                     residual=residual, converged=residual <= tol)
