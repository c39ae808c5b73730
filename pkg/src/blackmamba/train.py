"""Toy training: synthetic copy / associative-recall tasks, Adam, cosine schedule."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .model import ModelConfig, ModelParams, cross_entropy_loss, init_params, model_forward
from .moe import MoEParams, RoutingStats, SinkhornConfig

log = logging.getLogger(__name__)

TASKS = ("copy", "associative-recall")
PAD, DELIM = 0, 1


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class SyntheticBatch:
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray


def _copy_sequence(prefix: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    seq = np.concatenate([prefix, [DELIM], prefix])
    inputs, targets = seq[:-1], seq[1:]
    mask = np.zeros(len(targets), dtype=bool)
    mask[len(prefix):] = True
    return inputs, targets, mask


def copy_example(prefix) -> SyntheticBatch:
    """One copy sequence: ``prefix, DELIM, prefix``; only the copied half is scored."""
    inputs, targets, mask = _copy_sequence(np.asarray(prefix))
    return SyntheticBatch(inputs[None], targets[None], mask[None])


def recall_example(pairs: list[tuple[int, int]], queries: list[int]) -> SyntheticBatch:
    """Key/value pairs followed by ``query, value`` pairs; the values after queries are scored."""
    lookup = dict(pairs)
    seq = [t for kv in pairs for t in kv]
    for q in queries:
        seq += [q, lookup[q]]
    seq = np.asarray(seq)
    inputs, targets = seq[:-1], seq[1:]
    mask = np.zeros(len(targets), dtype=bool)
    start = 2 * len(pairs)
    mask[start::2] = True
    return SyntheticBatch(inputs[None], targets[None], mask[None])


def make_task_batch(task: str, rng: np.random.Generator, batch: int, length: int, vocab: int,
                    n_pairs: int | None = None) -> SyntheticBatch:
    """A batch of ``length``-token training sequences.

    copy: a prefix of ``length // 2`` tokens drawn from ``[2, vocab)``, a
    delimiter, then the prefix again.
    associative-recall: ``n_pairs`` distinct keys from the lower half of the
    vocabulary with values from the upper half, then queries of those keys,
    each followed by its value.
    """
    if task == "copy":
        if length < 2 or vocab < 3:
            raise ValueError("copy needs length >= 2 and vocab >= 3")
        p = length // 2
        rows = [_copy_sequence(rng.integers(2, vocab, size=p)) for _ in range(batch)]
        inputs = np.stack([r[0] for r in rows])
        targets = np.stack([r[1] for r in rows])
        mask = np.stack([r[2] for r in rows])
        if inputs.shape[1] < length:
            pad = length - inputs.shape[1]
            inputs = np.pad(inputs, ((0, 0), (0, pad)))
            targets = np.pad(targets, ((0, 0), (0, pad)))
            mask = np.pad(mask, ((0, 0), (0, pad)))
        return SyntheticBatch(inputs, targets, mask)
    if task == "associative-recall":
        half = vocab // 2
        n_pairs = n_pairs or max(1, length // 8)
        n_queries = (length - 2 * n_pairs) // 2 + 1  # covers length + 1 tokens before the shift
        if n_pairs > half - 1 or n_queries < 1:
            raise ValueError(f"associative-recall with length {length}, vocab {vocab} cannot hold {n_pairs} pairs")
        out = []
        for _ in range(batch):
            keys = rng.choice(np.arange(1, half), size=n_pairs, replace=False)
            vals = rng.integers(half, vocab, size=n_pairs)
            queries = rng.choice(keys, size=n_queries, replace=True)
            out.append(recall_example(list(zip(keys.tolist(), vals.tolist())), queries.tolist()))
        inputs = np.concatenate([b.inputs for b in out])[:, :length]
        targets = np.concatenate([b.targets for b in out])[:, :length]
        mask = np.concatenate([b.mask for b in out])[:, :length]
        return SyntheticBatch(inputs, targets, mask)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


# --------------------------------------------------------------------------- optimiser


def cosine_lr(step: int, total: int, peak: float, minimum: float, warmup_frac: float = 0.01) -> float:
    """Linear warmup over ``warmup_frac`` of the steps, then cosine decay to ``minimum``."""
    warmup = max(1, int(round(warmup_frac * total))) if warmup_frac > 0 else 0
    if step < warmup:
        return peak * (step + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return minimum + 0.5 * (peak - minimum) * (1 + math.cos(math.pi * progress))


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params: list[T.Tensor], betas=(0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if lr == 0.0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)


# --------------------------------------------------------------------------- loop


@dataclass
class TrainConfig:
    task: str = "copy"
    steps: int = 2000
    batch_size: int = 16
    seq_len: int = 32
    task_vocab: int | None = None
    n_pairs: int | None = None
    peak_lr: float = 3e-3
    min_lr: float = 3e-4
    warmup_frac: float = 0.01
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0
    routing: str = "sinkhorn"
    temperature: float = 2.0
    sinkhorn_init: str = "fast"

    def __post_init__(self):
        problems = []
        if self.task not in TASKS:
            problems.append(f"task {self.task!r} not in {TASKS}")
        if self.min_lr > self.peak_lr:
            problems.append(f"min_lr ({self.min_lr}) exceeds peak_lr ({self.peak_lr})")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.steps < 0 or self.batch_size < 1 or self.seq_len < 2:
            problems.append("steps >= 0, batch_size >= 1 and seq_len >= 2 required")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list = field(default_factory=list)
    routing: RoutingStats | None = None
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    checkpoints: list = field(default_factory=list)


def loss_and_grads(params: ModelParams, batch: SyntheticBatch, tcfg: TrainConfig,
                   stats: RoutingStats | None = None, step: int = 0) -> float:
    params.zero_grad()
    with T.Tape() as tape:
        logits = model_forward(params, batch.inputs, routing=tcfg.routing,
                               sinkhorn_cfg=SinkhornConfig(tcfg.temperature, tcfg.sinkhorn_init),
                               stats=stats, step_index=step)
        loss = cross_entropy_loss(logits, batch.targets, batch.mask)
    tape.backward(loss)
    return float(loss.item())


def unchosen_experts_have_zero_grad(params: ModelParams, stats: RoutingStats, step: int) -> bool:
    per_layer = stats.per_layer(step)
    for i, pair in enumerate(params.pairs):
        if not isinstance(pair.channel, MoEParams) or i not in per_layer:
            continue
        for e, count in enumerate(per_layer[i]):
            if count == 0:
                for t in pair.channel.experts[e].tensors().values():
                    if t.grad is not None and np.any(t.grad != 0):
                        return False
    return True


def evaluate(params: ModelParams, tcfg: TrainConfig, n_batches: int = 4, seed: int = 12345,
             routing: str | None = None) -> dict:
    """Masked loss and exact-match accuracy on fresh batches."""
    rng = np.random.default_rng(seed)
    vocab = tcfg.task_vocab or params.config.vocab_size
    losses, correct, total = [], 0, 0
    for _ in range(n_batches):
        b = make_task_batch(tcfg.task, rng, tcfg.batch_size, tcfg.seq_len, vocab, tcfg.n_pairs)
        logits = model_forward(params, b.inputs, routing=routing or tcfg.routing,
                               sinkhorn_cfg=SinkhornConfig(tcfg.temperature, tcfg.sinkhorn_init))
        losses.append(float(cross_entropy_loss(logits, b.targets, b.mask).item()))
        pred = logits.data.argmax(axis=-1)
        correct += int(((pred == b.targets) & b.mask).sum())
        total += int(b.mask.sum())
    return {"loss": float(np.mean(losses)), "accuracy": correct / total}


def train_loop(model_config: ModelConfig, tcfg: TrainConfig, out_dir=None, params: ModelParams | None = None,
               target_loss: float | None = None, target_accuracy: float | None = None,
               eval_every: int = 0) -> TrainResult:
    """Train from ``tcfg.seed``; optionally stop early once a target is met.

    Metrics go to ``out_dir/metrics.jsonl`` and checkpoints to
    ``out_dir/ckpt_XXXXXX.bmc`` when ``out_dir`` is given.
    """
    if tcfg.routing == "sinkhorn" and not model_config.uses_moe:
        tcfg = TrainConfig(**{**asdict(tcfg), "routing": "argmax"})
    params = params or init_params(model_config, tcfg.seed)
    vocab = tcfg.task_vocab or model_config.vocab_size
    if vocab > model_config.vocab_size:
        raise ValueError(f"task_vocab {vocab} exceeds model vocab_size {model_config.vocab_size}")
    rng = np.random.default_rng(tcfg.seed + 1)
    opt = Adam(params.parameters(), weight_decay=tcfg.weight_decay)
    stats = RoutingStats(model_config.n_experts)
    result = TrainResult(params=params, routing=stats)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")
    if tcfg.steps == 0 and out is not None:
        result.checkpoints.append(str(save_checkpoint(out / "ckpt_000000.bmc", params, {"step": 0})))
    t0 = time.perf_counter()
    ema = None
    try:
        for step in range(tcfg.steps):
            batch = make_task_batch(tcfg.task, rng, tcfg.batch_size, tcfg.seq_len, vocab, tcfg.n_pairs)
            try:
                with np.errstate(invalid="ignore", over="ignore"):
                    loss = loss_and_grads(params, batch, tcfg, stats, step)
            except ValueError as exc:
                if "non-finite" not in str(exc):
                    raise
                raise TrainingDiverged(f"non-finite activations at step {step}: {exc}") from exc
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at step {step} (lr "
                                       f"{cosine_lr(step, tcfg.steps, tcfg.peak_lr, tcfg.min_lr, tcfg.warmup_frac):.3g})")
            if step == 0:
                result.initial_loss = loss
            lr = cosine_lr(step, tcfg.steps, tcfg.peak_lr, tcfg.min_lr, tcfg.warmup_frac)
            opt.step(lr)
            ema = loss if ema is None else 0.95 * ema + 0.05 * loss
            result.final_loss = ema
            last = step == tcfg.steps - 1
            if step % tcfg.log_every == 0 or last:
                record = {"step": step, "loss": loss, "loss_ema": ema, "lr": lr,
                          "elapsed_s": round(time.perf_counter() - t0, 3)}
                if model_config.uses_moe:
                    record["expert_counts"] = {str(k): v.tolist() for k, v in stats.per_layer(step).items()}
                    record["unchosen_zero_grad"] = unchosen_experts_have_zero_grad(params, stats, step)
                result.metrics.append(record)
                if metrics_fh:
                    metrics_fh.write(json.dumps(record) + "\n")
                    metrics_fh.flush()
                log.info("step %d loss %.4f lr %.2e", step, loss, lr)
            if out is not None and tcfg.checkpoint_every and ((step + 1) % tcfg.checkpoint_every == 0 or last):
                path = save_checkpoint(out / f"ckpt_{step + 1:06d}.bmc", params, {"step": step + 1})
                result.checkpoints.append(str(path))
            if eval_every and (step + 1) % eval_every == 0 and (target_accuracy is not None or target_loss is not None):
                ev = evaluate(params, tcfg)
                result.metrics.append({"step": step, "eval": ev})
                if metrics_fh:
                    metrics_fh.write(json.dumps({"step": step, "eval": ev}) + "\n")
                if ((target_accuracy is None or ev["accuracy"] >= target_accuracy)
                        and (target_loss is None or ev["loss"] <= target_loss)):
                    break
    finally:
        if metrics_fh:
            metrics_fh.close()
    return result


__all__ = ["TASKS", "SyntheticBatch", "TrainConfig", "TrainResult", "TrainingDiverged", "Adam", "cosine_lr",
           "copy_example", "recall_example", "make_task_batch", "train_loop", "evaluate", "loss_and_grads",
           "unchosen_experts_have_zero_grad"]
