"""Selective state-space (Mamba) block: streaming step and full-sequence modes.

Per token the block computes::

    x, z   = x @ W_x, x @ W_z
    x      = silu(causal_conv(x))
    B, C   = x @ W_B, x @ W_C
    dt     = softplus(x @ W_dt_down @ W_dt_up + dt_bias)
    dA     = exp(-exp(ln_A) * dt)          # (I, H)
    h      = dA * h + (dt * B) * x         # outer-product input term
    y      = h @ C + D_bias * x
    out    = (silu(z) * y) @ W_y

Weights are stored input-major, so a projection is ``x @ W``.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor, np_silu, np_softplus

_faults: contextvars.ContextVar[frozenset] = contextvars.ContextVar("mamba_faults", default=frozenset())

SCAN_METHODS = ("fused", "sequential", "associative")
FAULTS = ("flip_dA_sign",)


@contextlib.contextmanager
def inject_fault(name: str):
    """Test hook: ``"flip_dA_sign"`` corrupts the streaming step only."""
    if name not in FAULTS:
        raise ValueError(f"unknown fault {name!r}; expected one of {FAULTS}")
    token = _faults.set(_faults.get() | {name})
    try:
        yield
    finally:
        _faults.reset(token)


@dataclass
class MambaParams:
    W_x: Tensor
    W_z: Tensor
    W_y: Tensor
    conv_filters: Tensor
    conv_bias: Tensor
    W_B: Tensor
    W_C: Tensor
    W_dt_down: Tensor
    W_dt_up: Tensor
    dt_bias: Tensor
    ln_A: Tensor
    D_bias: Tensor

    @property
    def d_model(self) -> int:
        return self.W_x.shape[0]

    @property
    def d_inner(self) -> int:
        return self.W_x.shape[1]

    @property
    def d_state(self) -> int:
        return self.W_B.shape[1]

    @property
    def dt_rank(self) -> int:
        return self.W_dt_down.shape[1]

    @property
    def conv_width(self) -> int:
        return self.conv_filters.shape[1]

    @property
    def dtype(self):
        return self.W_x.dtype

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def init_mamba_params(d_model: int, d_inner: int, d_state: int, dt_rank: int, conv_width: int,
                      rng_for: Callable[[str], np.random.Generator], dtype=np.float32,
                      std: float = 0.02, out_std: float | None = None) -> MambaParams:
    """Random block parameters; ``rng_for(name)`` supplies one generator per array."""
    out_std = std if out_std is None else out_std

    def normal(name, shape, s):
        return Tensor(rng_for(name).normal(0.0, s, size=shape).astype(dtype), requires_grad=True, name=name)

    bound = 1.0 / np.sqrt(conv_width)
    dt_init = rng_for("dt_bias").uniform(1e-3, 0.1, size=d_inner)
    # inverse softplus: softplus(dt_bias) == dt_init
    dt_bias = dt_init + np.log(-np.expm1(-dt_init))
    ln_A = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1)))

    def leaf(name, arr):
        return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name=name)

    return MambaParams(
        W_x=normal("W_x", (d_model, d_inner), std),
        W_z=normal("W_z", (d_model, d_inner), std),
        W_y=normal("W_y", (d_inner, d_model), out_std),
        conv_filters=leaf("conv_filters", rng_for("conv_filters").uniform(-bound, bound, (d_inner, conv_width))),
        conv_bias=leaf("conv_bias", rng_for("conv_bias").uniform(-bound, bound, d_inner)),
        W_B=normal("W_B", (d_inner, d_state), std),
        W_C=normal("W_C", (d_inner, d_state), std),
        W_dt_down=normal("W_dt_down", (d_inner, dt_rank), std),
        W_dt_up=leaf("W_dt_up", rng_for("W_dt_up").uniform(-dt_rank ** -0.5, dt_rank ** -0.5, (dt_rank, d_inner))),
        dt_bias=leaf("dt_bias", dt_bias),
        ln_A=leaf("ln_A", ln_A),
        D_bias=leaf("D_bias", np.ones(d_inner)),
    )


@dataclass
class MambaState:
    """Recurrent state of one sequence: ``h`` plus a ring buffer of past conv inputs."""

    h: np.ndarray
    conv_buffer: np.ndarray
    position: int = 0

    @classmethod
    def zeros(cls, params: MambaParams) -> "MambaState":
        dt = params.dtype
        return cls(h=np.zeros((params.d_inner, params.d_state), dtype=dt),
                   conv_buffer=np.zeros((max(params.conv_width - 1, 0), params.d_inner), dtype=dt))

    @property
    def nbytes(self) -> int:
        return self.h.nbytes + self.conv_buffer.nbytes

    def copy(self) -> "MambaState":
        return MambaState(self.h.copy(), self.conv_buffer.copy(), self.position)

    def window(self) -> np.ndarray:
        """Past conv inputs ordered oldest first."""
        slots = self.conv_buffer.shape[0]
        if slots == 0:
            return self.conv_buffer
        order = (self.position + np.arange(slots)) % slots
        return self.conv_buffer[order]


def state_nbytes(d_inner: int, d_state: int, conv_width: int, itemsize: int) -> int:
    return (d_inner * d_state + (conv_width - 1) * d_inner) * itemsize


def discretize(ln_A, B, dt_raw, dt_bias=0.0):
    """Return ``(dt, dA, dB)`` for one token or a batch of tokens.

    ``B`` has trailing shape ``(H,)`` and ``dt_raw`` trailing shape ``(I,)``;
    ``dA`` and ``dB`` have trailing shape ``(I, H)``.
    """
    ln_A = np.asarray(T._data(ln_A))
    dt = np_softplus(np.asarray(dt_raw) + np.asarray(T._data(dt_bias)))
    A = np.exp(ln_A)
    dA = np.exp(-A * dt[..., :, None])
    dB = dt[..., :, None] * np.asarray(B)[..., None, :]
    return dt, dA, dB


def step(params: MambaParams, state: MambaState, x_t: np.ndarray,
         force_dt: float | None = None) -> tuple[np.ndarray, MambaState]:
    """Advance one token. Returns ``(y_t, new_state)``; ``state`` is not modified.

    ``force_dt`` replaces the discretisation step size (``0.0`` freezes ``h``).
    """
    x_t = np.asarray(x_t)
    if x_t.shape != (params.d_model,):
        raise T.ShapeError(f"step expects a ({params.d_model},) input, got {x_t.shape}")
    p = {k: v.data for k, v in params.tensors().items()}
    D, I, H, R = params.d_model, params.d_inner, params.d_state, params.dt_rank
    for tag, m, j in (("mamba.W_x", D, I), ("mamba.W_z", D, I), ("mamba.W_B", I, H), ("mamba.W_C", I, H),
                      ("mamba.W_dt_down", I, R), ("mamba.W_dt_up", R, I), ("mamba.W_y", I, D)):
        T.charge_matmul(1, m, j, tag)
    xi = x_t @ p["W_x"]
    z = x_t @ p["W_z"]

    width = params.conv_width
    window = np.concatenate([state.window(), xi[None, :]], axis=0)  # (C, I) oldest first
    xc = p["conv_bias"] + np.einsum("ci,ic->i", window, p["conv_filters"])
    xc = np_silu(xc)

    Bv = xc @ p["W_B"]
    Cv = xc @ p["W_C"]
    dt_raw = (xc @ p["W_dt_down"]) @ p["W_dt_up"]
    dt, dA, dB = discretize(p["ln_A"], Bv, dt_raw, p["dt_bias"])
    if force_dt is not None:
        dt = np.full_like(dt, force_dt)
        dA = np.exp(-np.exp(p["ln_A"]) * dt[:, None])
        dB = dt[:, None] * Bv[None, :]
    if "flip_dA_sign" in _faults.get():
        dA = -dA
    h = dA * state.h + dB * xc[:, None]
    y = h @ Cv + p["D_bias"] * xc
    y = np_silu(z) * y
    out = y @ p["W_y"]

    buf = state.conv_buffer.copy()
    if width > 1:
        buf[state.position % (width - 1)] = xi
    return out, MambaState(h, buf, state.position + 1)


def scan_sequential(dA: np.ndarray, dBx: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
    """``h_t = dA_t * h_{t-1} + dBx_t`` along axis 0."""
    h = np.zeros_like(dBx[0]) if h0 is None else h0
    out = np.empty_like(dBx)
    for t in range(dBx.shape[0]):
        h = dA[t] * h + dBx[t]
        out[t] = h
    return out


def compose(later, earlier):
    """Associative combine of affine maps ``h -> a*h + b``; ``later`` applied second."""
    a2, b2 = later
    a1, b1 = earlier
    return a1 * a2, a2 * b1 + b2


def scan_associative(dA: np.ndarray, dBx: np.ndarray) -> np.ndarray:
    """Inclusive parallel prefix (Hillis-Steele) of the affine recurrence along axis 0."""
    if dA.shape != dBx.shape:
        raise T.ShapeError(f"scan operands differ: {dA.shape} vs {dBx.shape}")
    a = dA.copy()
    b = dBx.copy()
    n = a.shape[0]
    offset = 1
    while offset < n:
        a_new, b_new = compose((a[offset:], b[offset:]), (a[:-offset], b[:-offset]))
        a[offset:] = a_new
        b[offset:] = b_new
        offset *= 2
    return b


def linear_scan(dA, dBx, method: str = "sequential") -> Tensor:
    """Differentiable ``h_t = dA_t * h_{t-1} + dBx_t`` over the time axis ``-3``.

    Operands have shape ``(..., L, I, H)``; the state starts at zero.
    """
    dA, dBx = T.as_tensor(dA), T.as_tensor(dBx)
    a = np.moveaxis(dA.data, -3, 0)
    b = np.moveaxis(dBx.data, -3, 0)
    if method == "associative":
        hs = scan_associative(a, b)
    elif method == "sequential":
        hs = scan_sequential(a, b)
    else:
        raise ValueError(f"unknown scan method {method!r}")
    T.count_extra(2 * b.size, "ssm_scan")

    def bw(g):
        g0 = np.moveaxis(g, -3, 0)
        lam = np.zeros_like(g0[0])
        ga = np.empty_like(a)
        gb = np.empty_like(b)
        for t in range(a.shape[0] - 1, -1, -1):
            lam = lam + g0[t]
            gb[t] = lam
            ga[t] = lam * (hs[t - 1] if t > 0 else 0.0)
            lam = lam * a[t]
        return np.moveaxis(ga, 0, -3), np.moveaxis(gb, 0, -3)

    return T._make(np.moveaxis(hs, 0, -3), (dA, dBx), bw)


def selective_scan(u, delta, A, Bm, Cm, Dv) -> Tensor:
    """Fused scan producing ``y`` without materialising ``dA``/``dB`` on the tape.

    ``u, delta``: ``(..., L, I)``; ``A``: ``(I, H)`` positive; ``Bm, Cm``:
    ``(..., L, H)``; ``Dv``: ``(I,)``.
    """
    from ._kernels import selective_scan_bwd, selective_scan_fwd

    u, delta, A, Bm, Cm, Dv = (T.as_tensor(t) for t in (u, delta, A, Bm, Cm, Dv))
    lead = u.shape[:-2]
    L, inner = u.shape[-2:]
    nstate = A.shape[1]
    u3 = np.ascontiguousarray(u.data.reshape(-1, L, inner))
    d3 = np.ascontiguousarray(delta.data.reshape(-1, L, inner))
    B3 = np.ascontiguousarray(Bm.data.reshape(-1, L, nstate))
    C3 = np.ascontiguousarray(Cm.data.reshape(-1, L, nstate))
    Ad = np.ascontiguousarray(A.data)
    h0 = np.zeros((u3.shape[0], inner, nstate), dtype=u3.dtype)
    dA = np.exp(-Ad[None, None] * d3[..., None])
    y, hs = selective_scan_fwd(u3, d3, dA, B3, C3, Dv.data, h0)
    T.count_extra(u3.size * nstate * 9, "ssm_scan")

    def bw(g):
        g3 = np.ascontiguousarray(g.reshape(-1, L, inner))
        gu, gd, gA, gB, gC, gD, _ = selective_scan_bwd(g3, u3, d3, Ad, dA, B3, C3, Dv.data, h0, hs)
        return (gu.reshape(u.shape), gd.reshape(delta.shape), gA,
                gB.reshape(Bm.shape), gC.reshape(Cm.shape), gD)

    return T._make(y.reshape(lead + (L, inner)), (u, delta, A, Bm, Cm, Dv), bw)


def forward_sequence(params: MambaParams, x, scan: str = "fused") -> Tensor:
    """Run the block over ``x`` of shape ``(..., L, D)`` from a zero state.

    ``scan`` selects the fused kernel, or the unfused sequential / associative
    scan over explicitly discretised ``dA`` and ``dB * x``.
    """
    x = T.as_tensor(x)
    if x.shape[-1] != params.d_model or x.ndim < 2 or x.shape[-2] < 1:
        raise T.ShapeError(f"forward_sequence expects (..., L>=1, {params.d_model}), got {x.shape}")
    xi = T.matmul(x, params.W_x, tag="mamba.W_x")
    z = T.matmul(x, params.W_z, tag="mamba.W_z")
    xc = T.silu(T.causal_depthwise_conv1d(xi, params.conv_filters, params.conv_bias))
    Bm = T.matmul(xc, params.W_B, tag="mamba.W_B")
    Cm = T.matmul(xc, params.W_C, tag="mamba.W_C")
    dt_low = T.matmul(xc, params.W_dt_down, tag="mamba.W_dt_down")
    dt = T.softplus(T.matmul(dt_low, params.W_dt_up, tag="mamba.W_dt_up") + params.dt_bias)
    A = T.exp(params.ln_A)
    if scan == "fused":
        y = selective_scan(xc, dt, A, Bm, Cm, params.D_bias)
    elif scan in ("sequential", "associative"):
        dt4 = T.reshape(dt, dt.shape + (1,))
        dA = T.exp(T.neg(dt4 * A))
        dBx = dt4 * T.reshape(Bm, Bm.shape[:-1] + (1, Bm.shape[-1])) * T.reshape(xc, xc.shape + (1,))
        hs = linear_scan(dA, dBx, method=scan)
        Cm4 = T.reshape(Cm, Cm.shape[:-1] + (1, Cm.shape[-1]))
        y = T.tsum(hs * Cm4, axis=-1) + xc * params.D_bias
    else:
        raise ValueError(f"unknown scan {scan!r}; expected one of {SCAN_METHODS}")
    y = T.silu(z) * y
    return T.matmul(y, params.W_y, tag="mamba.W_y")


def forward_streaming(params: MambaParams, x: np.ndarray) -> np.ndarray:
    """Apply :func:`step` token by token from a zero state; ``x`` is ``(L, D)``."""
    state = MambaState.zeros(params)
    out = []
    for x_t in np.asarray(T._data(x)):
        y, state = step(params, state, x_t)
        out.append(y)
    return np.stack(out)
