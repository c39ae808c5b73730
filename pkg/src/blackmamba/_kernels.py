"""Fused selective-scan loops compiled with numba.

Shapes: ``u, delta`` are ``(batch, L, I)``; ``A`` is ``(I, H)`` (already
positive); ``dA = exp(-A * delta)`` is ``(batch, L, I, H)``, precomputed
because numpy's vectorised exp beats a scalar one inside the loop;
``Bm, Cm`` are ``(batch, L, H)``; ``Dv`` is ``(I,)``.
"""

import numba
import numpy as np


@numba.njit(cache=True, fastmath=True)
def selective_scan_fwd(u, delta, dA, Bm, Cm, Dv, h0):
    nb, length, inner = u.shape
    nstate = dA.shape[3]
    y = np.empty_like(u)
    hs = np.empty((nb, length, inner, nstate), dtype=u.dtype)
    # time outermost so every inner (i, n) sweep touches contiguous memory
    for b in range(nb):
        h = h0[b].copy()
        for t in range(length):
            for i in range(inner):
                d = delta[b, t, i]
                x = u[b, t, i]
                acc = Dv[i] * x
                for n in range(nstate):
                    h[i, n] = dA[b, t, i, n] * h[i, n] + d * Bm[b, t, n] * x
                    acc += Cm[b, t, n] * h[i, n]
                    hs[b, t, i, n] = h[i, n]
                y[b, t, i] = acc
    return y, hs


@numba.njit(cache=True, fastmath=True)
def selective_scan_bwd(gy, u, delta, A, dA, Bm, Cm, Dv, h0, hs):
    nb, length, inner = u.shape
    nstate = A.shape[1]
    gu = np.zeros_like(u)
    gdelta = np.zeros_like(delta)
    gA = np.zeros_like(A)
    gB = np.zeros_like(Bm)
    gC = np.zeros_like(Cm)
    gD = np.zeros_like(Dv)
    gh0 = np.zeros_like(h0)
    for b in range(nb):
        lam = np.zeros((inner, nstate), dtype=u.dtype)
        for t in range(length - 1, -1, -1):
            for i in range(inner):
                g = gy[b, t, i]
                d = delta[b, t, i]
                x = u[b, t, i]
                gD[i] += g * x
                gx = g * Dv[i]
                gd = 0.0
                for n in range(nstate):
                    h_t = hs[b, t, i, n]
                    gC[b, t, n] += g * h_t
                    lam[i, n] += g * Cm[b, t, n]
                    if t > 0:
                        h_prev = hs[b, t - 1, i, n]
                    else:
                        h_prev = h0[b, i, n]
                    da = dA[b, t, i, n]
                    gda = lam[i, n] * h_prev
                    gd += gda * da * (-A[i, n]) + lam[i, n] * Bm[b, t, n] * x
                    gA[i, n] += gda * da * (-d)
                    gB[b, t, n] += lam[i, n] * d * x
                    gx += lam[i, n] * d * Bm[b, t, n]
                    lam[i, n] = lam[i, n] * da
                gu[b, t, i] = gx
                gdelta[b, t, i] = gd
        gh0[b] = lam
    return gu, gdelta, gA, gB, gC, gD, gh0
