"""Model assembly for the four architecture variants.

``n_layers`` counts blocks: every mixer (Mamba or attention) and every channel
block (dense MLP or routed experts) is one layer, so a model has
``n_layers // 2`` mixer/channel pairs.  Each pair updates the residual stream as

    x <- x + Channel(LN(x + Mixer(LN(x))))
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import AttnParams, KVCache, attention_decode, attention_forward, init_attn_params
from .mamba import MambaParams, MambaState, forward_sequence, init_mamba_params, step
from .moe import (EXPERT_KINDS, ExpertParams, MoEParams, RoutingStats, SinkhornConfig, expert_apply,
                  init_expert, moe_forward)
from .tensor import Tensor, np_layernorm

VARIANTS = ("transformer", "mamba", "transformer-moe", "mamba-moe")
DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "mamba-moe"
    n_layers: int = 4
    d_model: int = 64
    expand: int = 2
    d_state: int = 16
    dt_rank: int = 4
    conv_width: int = 4
    n_experts: int = 4
    ffn_hidden: int = 128
    vocab_size: int = 256
    max_seq_len: int = 4096
    expert_kind: str = "swiglu"
    n_heads: int = 4
    tie_embeddings: bool = True
    dtype: str = "float32"
    init_std: float = 0.02

    def __post_init__(self):
        problems = []
        if self.variant not in VARIANTS:
            problems.append(f"variant {self.variant!r} not in {VARIANTS}")
        if self.n_layers < 2 or self.n_layers % 2:
            problems.append(f"n_layers must be even and >= 2, got {self.n_layers}")
        for name in ("d_model", "expand", "d_state", "dt_rank", "conv_width", "n_experts",
                     "ffn_hidden", "vocab_size", "max_seq_len", "n_heads"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive, got {getattr(self, name)}")
        if not self.init_std > 0:
            problems.append(f"init_std must be positive, got {self.init_std}")
        if self.expert_kind not in EXPERT_KINDS:
            problems.append(f"expert_kind {self.expert_kind!r} not in {EXPERT_KINDS}")
        if self.dtype not in DTYPES:
            problems.append(f"dtype {self.dtype!r} not in {tuple(DTYPES)}")
        if self.uses_attention and self.d_model % max(self.n_heads, 1):
            problems.append(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def n_pairs(self) -> int:
        return self.n_layers // 2

    @property
    def uses_attention(self) -> bool:
        return self.variant.startswith("transformer")

    @property
    def uses_moe(self) -> bool:
        return self.variant.endswith("-moe")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


# Paper-scale presets are only ever counted symbolically.  Table IV leaves the
# vocabulary and dt rank open; 50304 and ceil(D/32) are assumptions.
PRESETS: dict[str, ModelConfig] = {
    "tiny-mamba-moe": ModelConfig(),
    "tiny-mamba": ModelConfig(variant="mamba", expert_kind="swiglu"),
    "tiny-transformer": ModelConfig(variant="transformer"),
    "tiny-transformer-moe": ModelConfig(variant="transformer-moe"),
    "tiny-standard": ModelConfig(expert_kind="standard", ffn_hidden=256),
    "340M/1.5B": ModelConfig(n_layers=30, d_model=1152, d_state=16, dt_rank=math.ceil(1152 / 32), conv_width=4,
                             n_experts=8, ffn_hidden=3072, vocab_size=50304, max_seq_len=2048, n_heads=16),
    "630M/2.8B": ModelConfig(n_layers=36, d_model=1472, d_state=16, dt_rank=math.ceil(1472 / 32), conv_width=4,
                             n_experts=8, ffn_hidden=3872, vocab_size=50304, max_seq_len=2048, n_heads=16),
}
PAPER_PRESETS = ("340M/1.5B", "630M/2.8B")


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class PairParams:
    mixer_norm: Tensor
    mixer: MambaParams | AttnParams
    channel_norm: Tensor
    channel: MoEParams | ExpertParams


@dataclass
class ModelParams:
    config: ModelConfig
    embed: Tensor
    pairs: list[PairParams]
    final_norm: Tensor
    pos_embed: Tensor | None = None
    unembed: Tensor | None = None
    seed: int = 0

    def tensors(self) -> dict[str, Tensor]:
        return dict(named_tensors(self))

    def parameters(self) -> list[Tensor]:
        return list(self.tensors().values())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def named_tensors(params: ModelParams) -> Iterator[tuple[str, Tensor]]:
    yield "embed", params.embed
    if params.pos_embed is not None:
        yield "pos_embed", params.pos_embed
    for i, pair in enumerate(params.pairs):
        yield f"layers.{i}.mixer_norm", pair.mixer_norm
        for k, v in pair.mixer.tensors().items():
            yield f"layers.{i}.mixer.{k}", v
        yield f"layers.{i}.channel_norm", pair.channel_norm
        for k, v in pair.channel.tensors().items():
            yield f"layers.{i}.channel.{k}", v
    yield "final_norm", params.final_norm
    if params.unembed is not None:
        yield "unembed", params.unembed


def _rng_factory(seed: int, prefix: str):
    def rng_for(name: str) -> np.random.Generator:
        return np.random.default_rng([seed, zlib.crc32(f"{prefix}.{name}".encode())])
    return rng_for


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Initialise every array from a generator keyed by ``(seed, array name)``.

    Dense channel blocks share keys with expert 0 of the routed variant, so a
    one-expert MoE model and its dense counterpart start from identical weights.
    """
    dt = config.np_dtype
    D = config.d_model
    std = config.init_std
    out_std = std / math.sqrt(2 * config.n_layers)

    def normal(key, shape, s=std):
        return Tensor(_rng_factory(seed, key)("w").normal(0.0, s, size=shape).astype(dt), requires_grad=True, name=key)

    def ones(key, n):
        return Tensor(np.ones(n, dtype=dt), requires_grad=True, name=key)

    pairs = []
    for i in range(config.n_pairs):
        if config.uses_attention:
            mixer = init_attn_params(D, config.n_heads, _rng_factory(seed, f"layers.{i}.attn"), dt, std, out_std)
        else:
            mixer = init_mamba_params(D, config.d_inner, config.d_state, config.dt_rank, config.conv_width,
                                      _rng_factory(seed, f"layers.{i}.mamba"), dt, std, out_std)
        experts = [init_expert(config.expert_kind, D, config.ffn_hidden, _rng_factory(seed, f"layers.{i}.ffn.{e}"),
                               dt, std, out_std)
                   for e in range(config.n_experts if config.uses_moe else 1)]
        if config.uses_moe:
            channel = MoEParams(normal(f"layers.{i}.router", (config.n_experts, D)), experts)
        else:
            channel = experts[0]
        pairs.append(PairParams(ones(f"layers.{i}.mixer_norm", D), mixer, ones(f"layers.{i}.channel_norm", D), channel))

    return ModelParams(
        config=config,
        embed=normal("embed", (config.vocab_size, D)),
        pairs=pairs,
        final_norm=ones("final_norm", D),
        pos_embed=normal("pos_embed", (config.max_seq_len, D)) if config.uses_attention else None,
        unembed=None if config.tie_embeddings else normal("unembed", (D, config.vocab_size)),
        seed=seed,
    )


def _check_tokens(config: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.dtype.kind not in "iu":
        raise ValueError(f"tokens must be integers, got {tokens.dtype}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        bad = tokens[(tokens < 0) | (tokens >= config.vocab_size)][0]
        raise ValueError(f"token {int(bad)} out of range for vocab_size {config.vocab_size}")
    if tokens.shape[-1] < 1:
        raise ValueError("need at least one token")
    if config.uses_attention and tokens.shape[-1] > config.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[-1]} exceeds max_seq_len {config.max_seq_len}")
    return tokens


def _unembed(params: ModelParams, x) -> Tensor:
    W = T.transpose(params.embed) if params.unembed is None else params.unembed
    return T.matmul(x, W, tag="unembed")


def model_forward(params: ModelParams, tokens, routing: str = "argmax",
                  sinkhorn_cfg: SinkhornConfig | None = None, gate: str = "sigmoid", scan: str = "fused",
                  stats: RoutingStats | None = None, step_index: int = 0) -> Tensor:
    """Logits of shape ``tokens.shape + (vocab,)`` for ``(L,)`` or ``(B, L)`` tokens.

    ``routing="argmax"`` routes each token on its own logits (causal, what
    decoding uses); ``"sinkhorn"`` balances over all ``B*L`` tokens at once.
    """
    cfg = params.config
    tokens = _check_tokens(cfg, tokens)
    x = T.getitem(params.embed, tokens)
    if params.pos_embed is not None:
        x = x + T.getitem(params.pos_embed, np.arange(tokens.shape[-1]))
    for i, pair in enumerate(params.pairs):
        h = T.layernorm_nobias(x, pair.mixer_norm)
        if isinstance(pair.mixer, MambaParams):
            h = forward_sequence(pair.mixer, h, scan=scan)
        else:
            h = attention_forward(pair.mixer, h)
        h = T.layernorm_nobias(x + h, pair.channel_norm)
        if isinstance(pair.channel, MoEParams):
            flat = T.reshape(h, (-1, cfg.d_model))
            y, st = moe_forward(pair.channel, flat, routing=routing, sinkhorn_cfg=sinkhorn_cfg, gate=gate)
            if stats is not None:
                stats.record(i, st.counts, step=step_index, converged=st.converged)
            y = T.reshape(y, h.shape)
        else:
            y = expert_apply(pair.channel, h)
        x = x + y
    x = T.layernorm_nobias(x, params.final_norm)
    return _unembed(params, x)


def cross_entropy_loss(logits, targets, mask=None) -> Tensor:
    """Mean next-token negative log-likelihood over (masked) positions."""
    return T.cross_entropy(logits, targets, mask)


# --------------------------------------------------------------------------- streaming


@dataclass
class GenerationState:
    mixers: list = field(default_factory=list)
    position: int = 0

    @property
    def nbytes(self) -> int:
        return sum(m.nbytes for m in self.mixers)


def init_generation_state(params: ModelParams, capacity: int = 256) -> GenerationState:
    mixers = []
    for pair in params.pairs:
        if isinstance(pair.mixer, MambaParams):
            mixers.append(MambaState.zeros(pair.mixer))
        else:
            mixers.append(KVCache(pair.mixer, capacity))
    return GenerationState(mixers)


def _channel_step(channel, h: np.ndarray, gate: str) -> np.ndarray:
    if isinstance(channel, MoEParams):
        y, _ = moe_forward(channel, h[None, :], routing="argmax", gate=gate)
        return y.data[0]
    return expert_apply(channel, h).data


def decode_step(params: ModelParams, state: GenerationState, token: int, gate: str = "sigmoid") -> np.ndarray:
    """Consume one token, update ``state`` in place and return next-token logits."""
    cfg = params.config
    if not 0 <= int(token) < cfg.vocab_size:
        raise ValueError(f"token {token} out of range for vocab_size {cfg.vocab_size}")
    if cfg.uses_attention and state.position >= cfg.max_seq_len:
        raise ValueError(f"position {state.position} exceeds max_seq_len {cfg.max_seq_len}")
    x = params.embed.data[int(token)]
    if params.pos_embed is not None:
        x = x + params.pos_embed.data[state.position]
    for i, pair in enumerate(params.pairs):
        h = np_layernorm(x, pair.mixer_norm.data)
        if isinstance(pair.mixer, MambaParams):
            h, state.mixers[i] = step(pair.mixer, state.mixers[i], h)
        else:
            h = attention_decode(pair.mixer, state.mixers[i], h)
        h = np_layernorm(x + h, pair.channel_norm.data)
        x = x + _channel_step(pair.channel, h, gate)
    x = np_layernorm(x, params.final_norm.data)
    W = params.embed.data.T if params.unembed is None else params.unembed.data
    T.charge_matmul(1, cfg.d_model, cfg.vocab_size, "unembed")
    state.position += 1
    return x @ W


def generate(params: ModelParams, prompt, n_tokens: int, mode: str = "greedy", temperature: float = 1.0,
             seed: int = 0, return_logits: bool = False):
    """Extend ``prompt`` by ``n_tokens`` using streaming state only.

    Returns the full token list (prompt included), plus the per-position logits
    when ``return_logits`` is set.
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must contain at least one token")
    if mode not in ("greedy", "temperature"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    tokens = list(prompt)
    if n_tokens == 0:
        return (tokens, []) if return_logits else tokens
    state = init_generation_state(params, capacity=len(prompt) + n_tokens)
    history = []
    logits = None
    for t in prompt:
        logits = decode_step(params, state, t)
        history.append(logits)
    for _ in range(n_tokens):
        if mode == "greedy":
            nxt = int(np.argmax(logits))
        else:
            p = T.np_softmax(logits.astype(np.float64) / temperature)
            nxt = int(rng.choice(len(p), p=p))
        tokens.append(nxt)
        if len(tokens) == len(prompt) + n_tokens:
            break
        logits = decode_step(params, state, nxt)
        history.append(logits)
    return (tokens, history) if return_logits else tokens
