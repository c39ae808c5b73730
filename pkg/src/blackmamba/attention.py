"""Causal multi-head self-attention with a KV cache, the comparison baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .moe import ExpertParams, expert_apply
from .tensor import Tensor, np_softmax


@dataclass
class AttnParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    n_heads: int

    @property
    def d_model(self) -> int:
        return self.W_Q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.W_Q.shape[1] // self.n_heads

    def tensors(self) -> dict[str, Tensor]:
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V, "W_O": self.W_O}


def init_attn_params(d_model: int, n_heads: int, rng_for: Callable[[str], np.random.Generator],
                     dtype=np.float32, std: float = 0.02, out_std: float | None = None) -> AttnParams:
    if d_model % n_heads:
        raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
    out_std = std if out_std is None else out_std

    def normal(name, s):
        return Tensor(rng_for(name).normal(0.0, s, size=(d_model, d_model)).astype(dtype),
                      requires_grad=True, name=name)

    return AttnParams(normal("W_Q", std), normal("W_K", std), normal("W_V", std), normal("W_O", out_std), n_heads)


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    # (..., L, h*d) -> (..., h, L, d)
    *lead, L, width = t.shape
    t = T.reshape(t, tuple(lead) + (L, n_heads, width // n_heads))
    nd = t.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return T.transpose(t, axes)


def _merge_heads(t: Tensor) -> Tensor:
    *lead, h, L, d = t.shape
    nd = t.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return T.reshape(T.transpose(t, axes), tuple(lead) + (L, h * d))


def causal_mask(length: int, dtype=np.float64) -> np.ndarray:
    mask = np.zeros((length, length), dtype=dtype)
    mask[np.triu_indices(length, k=1)] = -np.inf
    return mask


def attention_forward(params: AttnParams, x) -> Tensor:
    """Scaled dot-product attention with a causal mask over ``x`` of shape ``(..., L, D)``."""
    x = T.as_tensor(x)
    L = x.shape[-2]
    if L < 1:
        raise T.ShapeError("attention needs at least one position")
    q = _split_heads(T.matmul(x, params.W_Q, tag="attn.W_Q"), params.n_heads)
    k = _split_heads(T.matmul(x, params.W_K, tag="attn.W_K"), params.n_heads)
    v = _split_heads(T.matmul(x, params.W_V, tag="attn.W_V"), params.n_heads)
    nd = k.ndim
    kt = T.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = T.matmul(q, kt, tag="attn.scores") * (1.0 / np.sqrt(params.head_dim))
    scores = scores + causal_mask(L, x.dtype)
    weights = T.softmax(scores, axis=-1)
    ctx = _merge_heads(T.matmul(weights, v, tag="attn.context"))
    return T.matmul(ctx, params.W_O, tag="attn.W_O")


class KVCache:
    """Keys and values of one attention layer for the positions seen so far."""

    def __init__(self, params: AttnParams, capacity: int = 256):
        self.n_heads = params.n_heads
        self.head_dim = params.head_dim
        self.dtype = params.W_Q.dtype
        self.length = 0
        self._k = np.zeros((self.n_heads, capacity, self.head_dim), dtype=self.dtype)
        self._v = np.zeros_like(self._k)

    @property
    def keys(self) -> np.ndarray:
        return self._k[:, :self.length]

    @property
    def values(self) -> np.ndarray:
        return self._v[:, :self.length]

    @property
    def nbytes(self) -> int:
        """Bytes of the live cache: ``2 * length * D * itemsize``."""
        return 2 * self.length * self.n_heads * self.head_dim * np.dtype(self.dtype).itemsize

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        if self.length == self._k.shape[1]:
            grow = max(self._k.shape[1], 1)
            pad = np.zeros((self.n_heads, grow, self.head_dim), dtype=self.dtype)
            self._k = np.concatenate([self._k, pad], axis=1)
            self._v = np.concatenate([self._v, pad.copy()], axis=1)
        self._k[:, self.length] = k
        self._v[:, self.length] = v
        self.length += 1


def kv_nbytes(n_attn_layers: int, length: int, d_model: int, itemsize: int) -> int:
    return n_attn_layers * 2 * length * d_model * itemsize


def attention_decode(params: AttnParams, cache: KVCache, x_t: np.ndarray) -> np.ndarray:
    """One cached decoding step for a single ``(D,)`` input; appends to ``cache``."""
    h, d = params.n_heads, params.head_dim
    q = (x_t @ params.W_Q.data).reshape(h, d)
    k = (x_t @ params.W_K.data).reshape(h, d)
    v = (x_t @ params.W_V.data).reshape(h, d)
    cache.append(k, v)
    n = cache.length
    D = params.d_model
    for tag in ("attn.W_Q", "attn.W_K", "attn.W_V", "attn.W_O"):
        T.charge_matmul(1, D, D, tag)
    T.charge_matmul(h, d, n, "attn.scores")
    T.charge_matmul(h, n, d, "attn.context")
    scores = np.einsum("hd,hnd->hn", q, cache.keys) / np.sqrt(d)
    w = np_softmax(scores, axis=-1)
    ctx = np.einsum("hn,hnd->hd", w, cache.values).reshape(h * d)
    return ctx @ params.W_O.data


def transformer_layer(attn: AttnParams, mlp: ExpertParams, ln1_gain, ln2_gain, x) -> Tensor:
    """``x + MLP(LN(x + attention(LN(x))))`` (sequential residual form)."""
    x = T.as_tensor(x)
    inner = x + attention_forward(attn, T.layernorm_nobias(x, ln1_gain))
    return x + expert_apply(mlp, T.layernorm_nobias(inner, ln2_gain))
