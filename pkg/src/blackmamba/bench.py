"""Generation latency, state/cache memory and routing statistics."""

from __future__ import annotations

import copy
import csv
import io
import json
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .model import ModelConfig, ModelParams, decode_step, init_generation_state, init_params, model_forward
from .moe import RoutingStats, SinkhornConfig

LATENCY_COLUMNS = ("variant", "position", "ns_per_token", "state_bytes", "repeats")


@dataclass
class LatencySample:
    variant: str
    position: int
    ns_per_token: float
    state_bytes: int
    repeats: int


def state_bytes(config: ModelConfig, position: int) -> int:
    """Bytes of decoding state after ``position`` tokens, from the config alone.

    Mamba layers hold ``I*H`` state values plus ``(C-1)*I`` conv inputs
    regardless of position; attention layers hold ``2*position*D`` cached
    keys and values.
    """
    item = np.dtype(config.np_dtype).itemsize
    if config.uses_attention:
        return config.n_pairs * 2 * position * config.d_model * item
    I = config.d_inner
    return config.n_pairs * (I * config.d_state + (config.conv_width - 1) * I) * item


def _advance(params: ModelParams, state, n: int, rng: np.random.Generator) -> None:
    for tok in rng.integers(0, params.config.vocab_size, size=n):
        decode_step(params, state, int(tok))


def latency_sweep(config: ModelConfig, lengths, repeats: int = 5, warmup: int = 3, window: int = 8,
                  seed: int = 0, params: ModelParams | None = None) -> list[LatencySample]:
    """Median per-token decode time at each position in ``lengths``.

    Generation starts from a one-token prompt.  At each target position the
    state is snapshotted and ``window`` further tokens are timed from that
    snapshot ``warmup + repeats`` times; the first ``warmup`` runs are dropped.
    """
    lengths = [int(n) for n in lengths]
    if lengths != sorted(set(lengths)) or lengths[0] < 1:
        raise ValueError(f"lengths must be positive and strictly increasing, got {lengths}")
    if repeats < 5:
        raise ValueError("need at least 5 repeats for a median")
    if config.uses_attention and lengths[-1] + window > config.max_seq_len:
        config = config.with_(max_seq_len=lengths[-1] + window)
    params = params or init_params(config, seed)
    rng = np.random.default_rng(seed)
    samples = []
    with threadpool_limits(limits=1):
        state = init_generation_state(params, capacity=lengths[-1] + window)
        pos = 0
        for n in lengths:
            _advance(params, state, n - pos, rng)
            pos = n
            live = state.nbytes
            expected = state_bytes(config, n)
            if live != expected:
                raise AssertionError(f"state bytes {live} disagree with accounting {expected} at {n}")
            toks = rng.integers(0, config.vocab_size, size=window)
            times = []
            for r in range(warmup + repeats):
                trial = copy.deepcopy(state)
                t0 = time.perf_counter_ns()
                for tok in toks:
                    decode_step(params, trial, int(tok))
                elapsed = time.perf_counter_ns() - t0
                if r >= warmup:
                    times.append(elapsed / window)
            samples.append(LatencySample(config.variant, n, float(statistics.median(times)), expected, repeats))
    return samples


def samples_to_csv(samples, path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(LATENCY_COLUMNS), lineterminator="\n")
    w.writeheader()
    for s in samples:
        w.writerow(asdict(s))
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(buf.getvalue())
    return buf.getvalue()


def summarize(samples) -> dict:
    """Per-variant time ratios and byte growth, the quantities the shape checks use."""
    out = {}
    for variant in sorted({s.variant for s in samples}):
        rows = sorted((s for s in samples if s.variant == variant), key=lambda s: s.position)
        times = [s.ns_per_token for s in rows]
        out[variant] = {
            "positions": [s.position for s in rows],
            "ns_per_token": times,
            "state_bytes": [s.state_bytes for s in rows],
            "time_ratio_last_first": times[-1] / times[0],
            "time_strictly_increasing": all(b > a for a, b in zip(times, times[1:])),
            "bytes_constant": len({s.state_bytes for s in rows}) == 1,
            "bytes_linear": all(s.state_bytes * rows[0].position == rows[0].state_bytes * s.position for s in rows),
        }
    return out


def routing_histogram(params: ModelParams, batches, routing: str = "sinkhorn",
                      sinkhorn_cfg: SinkhornConfig | None = None) -> RoutingStats:
    """Token counts per (MoE layer, expert) over ``batches`` of token ids."""
    if not params.config.uses_moe:
        raise ValueError(f"routing statistics need an MoE variant, got {params.config.variant!r}")
    stats = RoutingStats(params.config.n_experts)
    for tokens in batches:
        model_forward(params, np.asarray(tokens), routing=routing, sinkhorn_cfg=sinkhorn_cfg, stats=stats)
    return stats


def random_batches(config: ModelConfig, n_batches: int, batch_size: int, length: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, config.vocab_size, size=(batch_size, length)) for _ in range(n_batches)]


def routing_summary(stats: RoutingStats) -> str:
    return json.dumps({"load_ratio": {str(k): v for k, v in stats.load_ratio().items()},
                       "tokens_per_layer": {str(k): int(v.sum()) for k, v in stats.per_layer().items()}},
                      indent=2)


__all__ = ["LatencySample", "LATENCY_COLUMNS", "state_bytes", "latency_sweep", "samples_to_csv", "summarize",
           "routing_histogram", "random_batches", "routing_summary"]
