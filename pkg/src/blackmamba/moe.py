"""Routed expert layer with top-1 Sinkhorn routing and sigmoid gates."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .sinkhorn import RoutePlan, route_top1, sinkhorn
from .tensor import Tensor

EXPERT_KINDS = ("standard", "swiglu")
ROUTING_MODES = ("sinkhorn", "argmax")
GATE_MODES = ("sigmoid", "one", "pi")


@dataclass
class ExpertParams:
    kind: str
    W_in: Tensor
    W_out: Tensor
    W_gate: Tensor | None = None

    @property
    def hidden(self) -> int:
        return self.W_in.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        out = {"W_in": self.W_in, "W_out": self.W_out}
        if self.W_gate is not None:
            out["W_gate"] = self.W_gate
        return out


@dataclass
class MoEParams:
    router_weight: Tensor  # (N, D)
    experts: list[ExpertParams]

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def tensors(self) -> dict[str, Tensor]:
        out = {"router_weight": self.router_weight}
        for e, ex in enumerate(self.experts):
            for k, v in ex.tensors().items():
                out[f"experts.{e}.{k}"] = v
        return out


@dataclass
class SinkhornConfig:
    temperature: float = 2.0
    init: str = "fast"
    tol: float = 1e-3
    max_iters: int = 100


@dataclass
class MoEStats:
    counts: np.ndarray
    expert_of: np.ndarray
    iters_used: int = 0
    residual: float = 0.0
    converged: bool = True


def init_expert(kind: str, d_model: int, hidden: int, rng_for: Callable[[str], np.random.Generator],
                dtype=np.float32, std: float = 0.02, out_std: float | None = None) -> ExpertParams:
    if kind not in EXPERT_KINDS:
        raise ValueError(f"unknown expert kind {kind!r}; expected one of {EXPERT_KINDS}")
    out_std = std if out_std is None else out_std

    def normal(name, shape, s):
        return Tensor(rng_for(name).normal(0.0, s, size=shape).astype(dtype), requires_grad=True, name=name)

    gate = normal("W_gate", (d_model, hidden), std) if kind == "swiglu" else None
    return ExpertParams(kind, normal("W_in", (d_model, hidden), std), normal("W_out", (hidden, d_model), out_std), gate)


def expert_apply(e: ExpertParams, x) -> Tensor:
    """``silu(x W_in) W_out`` or, for SwiGLU, ``(silu(x W_gate) * x W_in) W_out``."""
    h = T.matmul(x, e.W_in, tag="expert.W_in")
    if e.kind == "swiglu":
        h = T.silu(T.matmul(x, e.W_gate, tag="expert.W_gate")) * h
    else:
        h = T.silu(h)
    return T.matmul(h, e.W_out, tag="expert.W_out")


def router_logits(params: MoEParams, x) -> Tensor:
    return T.matmul(x, T.transpose(params.router_weight), tag="moe.router")


def plan_routes(logits: np.ndarray, routing: str, sinkhorn_cfg: SinkhornConfig | None = None) -> RoutePlan:
    """Choose one expert per sample. Selection never carries gradient."""
    if routing == "sinkhorn":
        cfg = sinkhorn_cfg or SinkhornConfig()
        return sinkhorn(logits, cfg.temperature, cfg.init, cfg.tol, cfg.max_iters)
    if routing == "argmax":
        return RoutePlan(pi=logits, expert_of=route_top1(logits), coeff=None, iters_used=0,
                         residual=0.0, converged=True)
    raise ValueError(f"unknown routing {routing!r}; expected one of {ROUTING_MODES}")


def _gates(logits: Tensor, plan: RoutePlan, gate: str) -> Tensor:
    S = logits.shape[0]
    if gate == "sigmoid":
        return T.sigmoid(T.getitem(logits, (np.arange(S), plan.expert_of)))
    if gate == "one":
        return Tensor(np.ones(S, dtype=logits.dtype))
    if gate == "pi":
        # diagnostic: weight by the (stop-gradient) plan probability
        return Tensor(plan.pi[np.arange(S), plan.expert_of].astype(logits.dtype))
    raise ValueError(f"unknown gate {gate!r}; expected one of {GATE_MODES}")


def moe_forward(params: MoEParams, x, routing: str = "sinkhorn", sinkhorn_cfg: SinkhornConfig | None = None,
                gate: str = "sigmoid") -> tuple[Tensor, MoEStats]:
    """Top-1 routed layer on ``x`` of shape ``(S, D)`` (already normalised).

    Tokens are gathered per expert, processed as one batch and scattered back.
    """
    x = T.as_tensor(x)
    if x.ndim != 2:
        raise T.ShapeError(f"moe_forward expects (S, D), got {x.shape}")
    S = x.shape[0]
    logits = router_logits(params, x)
    plan = plan_routes(logits.data, routing, sinkhorn_cfg)
    coeff = _gates(logits, plan, gate)
    N = params.n_experts
    counts = np.bincount(plan.expert_of, minlength=N)
    y = None
    for e, ex in enumerate(params.experts):
        rows = np.flatnonzero(plan.expert_of == e)
        if rows.size == 0:
            continue
        if rows.size == S:
            ye = expert_apply(ex, x) * T.reshape(coeff, (S, 1))
        else:
            ye = expert_apply(ex, T.getitem(x, rows)) * T.reshape(T.getitem(coeff, rows), (rows.size, 1))
            ye = T.scatter_rows(S, rows, ye)
        y = ye if y is None else y + ye
    stats = MoEStats(counts=counts, expert_of=plan.expert_of, iters_used=plan.iters_used,
                     residual=plan.residual, converged=plan.converged)
    return y, stats


def moe_forward_reference(params: MoEParams, x, expert_of: np.ndarray, gate: str = "sigmoid") -> Tensor:
    """Token-by-token evaluation for a fixed assignment; the dispatch oracle."""
    x = T.as_tensor(x)
    logits = router_logits(params, x)
    plan = RoutePlan(pi=np.zeros(logits.shape), expert_of=np.asarray(expert_of), coeff=None,
                     iters_used=0, residual=0.0, converged=True)
    coeff = _gates(logits, plan, gate)
    rows = []
    for a in range(x.shape[0]):
        e = int(expert_of[a])
        xa = T.getitem(x, slice(a, a + 1))
        rows.append(expert_apply(params.experts[e], xa) * T.getitem(coeff, slice(a, a + 1)))
    return T.concat(rows, axis=0)


@dataclass
class RoutingStats:
    """Token counts per ``(layer, expert)``, optionally per step."""

    n_experts: int
    counts: dict = field(default_factory=lambda: defaultdict(int))
    tokens: dict = field(default_factory=lambda: defaultdict(int))
    unconverged: int = 0

    def record(self, layer: int, layer_counts: np.ndarray, step: int = 0, converged: bool = True) -> None:
        for e, c in enumerate(np.asarray(layer_counts)):
            self.counts[(step, layer, e)] += int(c)
        self.tokens[(step, layer)] += int(np.sum(layer_counts))
        if not converged:
            self.unconverged += 1

    def merge(self, other: "RoutingStats") -> None:
        for k, v in other.counts.items():
            self.counts[k] += v
        for k, v in other.tokens.items():
            self.tokens[k] += v
        self.unconverged += other.unconverged

    def layers(self) -> list[int]:
        return sorted({layer for (_, layer, _) in self.counts})

    def per_layer(self, step: int | None = None) -> dict[int, np.ndarray]:
        out: dict[int, np.ndarray] = {}
        for (s, layer, e), c in self.counts.items():
            if step is not None and s != step:
                continue
            out.setdefault(layer, np.zeros(self.n_experts, dtype=np.int64))[e] += c
        return dict(sorted(out.items()))

    def load_ratio(self) -> dict[int, float]:
        """Max over mean expert load per layer (1.0 is perfectly balanced)."""
        return {layer: float(c.max() / c.mean()) if c.sum() else float("nan")
                for layer, c in self.per_layer().items()}

    def rows(self):
        for (step, layer, e), c in sorted(self.counts.items()):
            yield {"layer": layer, "expert": e, "token_count": c, "step": step}

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["layer", "expert", "token_count", "step"], lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow(row)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str, n_experts: int | None = None) -> "RoutingStats":
        rows = list(csv.DictReader(io.StringIO(text)))
        n = n_experts or (max(int(r["expert"]) for r in rows) + 1 if rows else 0)
        stats = cls(n)
        for r in rows:
            key = (int(r["step"]), int(r["layer"]), int(r["expert"]))
            stats.counts[key] += int(r["token_count"])
            stats.tokens[key[:2]] += int(r["token_count"])
        return stats
