"""The invariant suite behind ``selfcheck``: scan equivalence, the dt -> 0 fixed
point, Sinkhorn constraints and initialisation speed, gradients and FLOP/param
reconciliation.  Each check returns a :class:`CheckResult` instead of raising.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .accounting import (count_from_shapes, exact_count, mamba_param_terms, moe_flops_formula, moe_param_terms,
                         build_report)
from .attention import init_attn_params, transformer_layer
from .mamba import MambaState, forward_sequence, forward_streaming, init_mamba_params, step
from .model import ModelConfig, cross_entropy_loss, init_params, model_forward, preset
from .moe import MoEParams, expert_apply, init_expert, router_logits
from .sinkhorn import sinkhorn


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    data: dict = field(default_factory=dict)


def _rng_for(seed: int, prefix: str = ""):
    def rng_for(name: str) -> np.random.Generator:
        return np.random.default_rng([seed, zlib.crc32(f"{prefix}{name}".encode())])
    return rng_for


def random_mamba(seed: int, dtype=np.float64, std: float = 0.3):
    """A small Mamba block with random sizes and weights big enough to matter."""
    r = np.random.default_rng(seed)
    D = int(r.integers(2, 12))
    I = D * int(r.integers(1, 3))
    H = int(r.integers(1, 7))
    R = int(r.integers(1, 4))
    C = int(r.integers(1, 5))
    p = init_mamba_params(D, I, H, R, C, _rng_for(seed, "mamba."), dtype=dtype, std=std, out_std=std)
    p.conv_bias.data = r.normal(0, 0.1, size=I).astype(dtype)
    p.D_bias.data = r.normal(1, 0.1, size=I).astype(dtype)
    p.dt_bias.data = r.normal(0, 0.5, size=I).astype(dtype)  # dt near 0.7 so A and dt carry real gradient
    return p


def _timed(fn):
    def wrapper(*a, **kw) -> CheckResult:
        t0 = time.perf_counter()
        res = fn(*a, **kw)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def check_scan_equivalence(n_configs: int = 20, length: int = 64, seed: int = 0) -> CheckResult:
    """Step mode vs every sequence mode (float64, 1e-10); associative vs sequential (float32, 1e-6)."""
    worst64 = 0.0
    worst32 = 0.0
    for k in range(n_configs):
        p = random_mamba(seed + k)
        x = np.random.default_rng(1000 + seed + k).normal(size=(length, p.d_model))
        streamed = forward_streaming(p, x)
        for method in ("fused", "sequential", "associative"):
            worst64 = max(worst64, float(np.abs(forward_sequence(p, x, scan=method).data - streamed).max()))
        p32 = random_mamba(seed + k, dtype=np.float32)
        x32 = x.astype(np.float32)
        a = forward_sequence(p32, x32, scan="associative").data
        s = forward_sequence(p32, x32, scan="sequential").data
        worst32 = max(worst32, float(np.abs(a - s).max()))
    ok = worst64 < 1e-10 and worst32 < 1e-6
    return CheckResult("scan equivalence", ok,
                       f"{n_configs} configs L={length}: step vs sequence {worst64:.2e} (< 1e-10), "
                       f"associative vs sequential f32 {worst32:.2e} (< 1e-6)",
                       data={"max_abs_f64": worst64, "max_abs_f32": worst32})


@_timed
def check_dt_fixed_point(n_configs: int = 20, seed: int = 0) -> CheckResult:
    """With dt forced to zero the hidden state is bitwise unchanged."""
    bad = 0
    for k in range(n_configs):
        p = random_mamba(seed + k)
        r = np.random.default_rng(seed + k)
        state = MambaState.zeros(p)
        for _ in range(5):
            _, state = step(p, state, r.normal(size=p.d_model))
        before = state.h.copy()
        _, after = step(p, state, r.normal(size=p.d_model), force_dt=0.0)
        if not np.array_equal(before.view(np.uint64), after.h.view(np.uint64)):
            bad += 1
    return CheckResult("dt->0 fixed point", bad == 0, f"{n_configs - bad}/{n_configs} states bitwise unchanged")


@_timed
def check_sinkhorn_constraints(trials: int = 100, S: int = 256, N: int = 8, seed: int = 0) -> CheckResult:
    """Every plan converges and meets both marginals within 1e-3."""
    rng = np.random.default_rng(seed)
    ok = 0
    worst_row = worst_col = 0.0
    for _ in range(trials):
        plan = sinkhorn(rng.normal(size=(S, N)))
        row = float(np.abs(plan.pi.sum(axis=1) - 1).max())
        col = float(np.abs(plan.pi.sum(axis=0) - S / N).max())
        worst_row, worst_col = max(worst_row, row), max(worst_col, col)
        if plan.converged and row <= 1e-3 and col <= 1e-3 * (S / N):
            ok += 1
    return CheckResult("sinkhorn constraints", ok == trials,
                       f"{ok}/{trials} plans within tol (worst row {worst_row:.1e}, worst col {worst_col:.1e})")


def init_iterations(trials: int = 200, S: int = 256, N: int = 8, seed: int = 0, temperature: float = 2.0,
                    tol: float = 1e-3) -> dict:
    rng = np.random.default_rng(seed)
    fast, uniform = [], []
    for _ in range(trials):
        L = rng.normal(size=(S, N))
        fast.append(sinkhorn(L, temperature, init="fast", tol=tol).iters_used)
        uniform.append(sinkhorn(L, temperature, init="uniform", tol=tol).iters_used)
    fast, uniform = np.array(fast), np.array(uniform)
    return {"fast": fast, "uniform": uniform, "median_fast": float(np.median(fast)),
            "median_uniform": float(np.median(uniform)), "frac_fast_fewer": float(np.mean(fast < uniform))}


@_timed
def check_fast_init(trials: int = 200, S: int = 256, N: int = 8, seed: int = 0) -> CheckResult:
    """Median iterations: fast <= 2, uniform >= 5; fast strictly fewer in >= 95% of trials."""
    r = init_iterations(trials, S, N, seed)
    ok = r["median_fast"] <= 2 and r["median_uniform"] >= 5 and r["frac_fast_fewer"] >= 0.95
    return CheckResult("sinkhorn fast init", ok,
                       f"median iters fast {r['median_fast']:g} (<= 2), uniform {r['median_uniform']:g} (>= 5), "
                       f"fast fewer in {100 * r['frac_fast_fewer']:.0f}% (>= 95%)",
                       data={k: v for k, v in r.items() if not isinstance(v, np.ndarray)})


# --------------------------------------------------------------------------- gradients


def gradient_errors(loss_fn, tensors: dict, n_coords: int = 50, seed: int = 0, h: float = 1e-5,
                    floor: float = 1e-8) -> dict:
    """Relative error ``|g - n| / max(|g|, |n|, floor)`` at random coordinates.

    Coordinates are drawn uniformly over all entries of ``tensors``.
    """
    names = list(tensors)
    sizes = np.array([tensors[n].size for n in names])
    for t in tensors.values():
        t.grad = None
    with T.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    picks = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    errs = []
    for flat in picks:
        k = int(np.searchsorted(bounds, flat, side="right"))
        idx = int(flat - (bounds[k - 1] if k else 0))
        t = tensors[names[k]]
        view = t.data.reshape(-1)
        orig = view[idx]
        view[idx] = orig + h
        fp = float(loss_fn().data)
        view[idx] = orig - h
        fm = float(loss_fn().data)
        view[idx] = orig
        num = (fp - fm) / (2 * h)
        ana = 0.0 if t.grad is None else float(t.grad.reshape(-1)[idx])
        errs.append(abs(ana - num) / max(abs(ana), abs(num), floor))
    errs = np.array(errs)
    return {"max_rel_err": float(errs.max()), "n": len(errs)}


def _weighted_sum(out, seed):
    w = np.random.default_rng(seed).normal(size=out.shape)
    return T.tsum(out * w)


def _resample(params, seed: int) -> None:
    """Fan-in scaled weights so every coordinate has a gradient finite differences can resolve."""
    rng = np.random.default_rng(seed + 99)
    for name, t in params.tensors().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "ln_A" or name.endswith("norm"):
            continue
        if leaf == "dt_bias":
            t.data = rng.normal(0, 0.5, size=t.shape)
            continue
        if t.ndim == 2 and leaf != "conv_filters":
            t.data = rng.normal(0, 1 / np.sqrt(t.shape[0]), size=t.shape)
        else:
            t.data = rng.normal(0, 0.5, size=t.shape)


def grad_cases(seed: int = 0) -> dict:
    """``name -> (loss_fn, tensors)`` for each block type, all float64."""
    cases = {}
    rng = np.random.default_rng(seed)

    p = random_mamba(seed + 7)
    x = T.Tensor(rng.normal(size=(2, 12, p.d_model)), requires_grad=True, name="x")
    cases["mamba block"] = (lambda p=p, x=x: _weighted_sum(forward_sequence(p, x), seed),
                            {**{f"mixer.{k}": v for k, v in p.tensors().items()}, "x": x})

    for kind in ("swiglu", "standard"):
        e = init_expert(kind, 6, 10, _rng_for(seed, kind), dtype=np.float64, std=0.4, out_std=0.4)
        xe = T.Tensor(rng.normal(size=(5, 6)), requires_grad=True, name="x")
        cases[f"{kind} expert"] = (lambda e=e, xe=xe: _weighted_sum(expert_apply(e, xe), seed),
                                   {**e.tensors(), "x": xe})

    attn = init_attn_params(8, 2, _rng_for(seed, "attn."), dtype=np.float64, std=0.3)
    mlp = init_expert("swiglu", 8, 12, _rng_for(seed, "mlp."), dtype=np.float64, std=0.3, out_std=0.3)
    g1 = T.Tensor(1 + 0.1 * rng.normal(size=8), requires_grad=True, name="ln1")
    g2 = T.Tensor(1 + 0.1 * rng.normal(size=8), requires_grad=True, name="ln2")
    xa = T.Tensor(rng.normal(size=(2, 7, 8)), requires_grad=True, name="x")
    cases["attention layer"] = (lambda: _weighted_sum(transformer_layer(attn, mlp, g1, g2, xa), seed),
                                {**attn.tensors(), **{f"mlp.{k}": v for k, v in mlp.tensors().items()},
                                 "ln1": g1, "ln2": g2, "x": xa})

    for variant in ("mamba-moe", "transformer-moe"):
        cfg = ModelConfig(variant=variant, n_layers=4, d_model=8, expand=2, d_state=4, dt_rank=2, conv_width=3,
                          n_experts=3, ffn_hidden=12, vocab_size=11, max_seq_len=16, n_heads=2, dtype="float64")
        mp = init_params(cfg, seed)
        _resample(mp, seed)
        toks = rng.integers(0, cfg.vocab_size, size=(2, 9))
        tgt = rng.integers(0, cfg.vocab_size, size=(2, 9))
        cases[f"tiny {variant} loss"] = (
            lambda mp=mp, toks=toks, tgt=tgt: cross_entropy_loss(model_forward(mp, toks, routing="argmax"), tgt),
            mp.tensors())
    return cases


@_timed
def check_gradients(n_coords: int = 50, seed: int = 0, tol: float = 1e-4) -> CheckResult:
    """Reverse-mode vs central differences for every block type."""
    results = {name: gradient_errors(fn, tensors, n_coords, seed) for name, (fn, tensors) in grad_cases(seed).items()}
    worst = max(r["max_rel_err"] for r in results.values())
    detail = ", ".join(f"{k} {v['max_rel_err']:.1e}" for k, v in results.items())
    return CheckResult("gradients", worst < tol, f"max rel err over {n_coords} coords each: {detail} (< {tol:g})",
                       data=results)


# --------------------------------------------------------------------------- accounting


def moe_token_flops_all_experts(moe: MoEParams, x: np.ndarray) -> T.FlopCounter:
    """Matmul FLOPs of the router plus every expert applied to one token."""
    x = np.atleast_2d(x)
    with T.FlopCounter() as fc:
        router_logits(moe, x)
        for e in moe.experts:
            expert_apply(e, x)
    return fc


@_timed
def check_reconciliation(seed: int = 0) -> CheckResult:
    """Formula FLOPs per token exact; exact count == shape enumeration; block formula within 2%."""
    cfg = preset("tiny-standard")
    params = init_params(cfg, seed)
    moe = params.pairs[0].channel
    fc = moe_token_flops_all_experts(moe, np.random.default_rng(seed).normal(size=cfg.d_model).astype(np.float32))
    formula = moe_flops_formula(cfg.d_model, cfg.n_experts)
    flops_ok = fc.total == formula
    exact = exact_count(params)["total"]
    shapes = count_from_shapes(cfg)
    report = build_report(cfg, name="tiny-standard", measure=False)
    ratio = report.discrepancy["formula/exact (blocks only)"]
    closes = mamba_param_terms(cfg)["closes"] and moe_param_terms(cfg)["closes"]
    ok = flops_ok and exact == shapes and abs(ratio - 1) <= 0.02 and closes
    return CheckResult("flop/param reconciliation", ok,
                       f"moe FLOPs/token formula {formula:,} vs measured {fc.total:,}; exact params {exact:,} vs "
                       f"shapes {shapes:,}; block formula/exact {ratio:.4f} (within 2%), residuals close: {closes}",
                       data={"formula_flops": formula, "measured_flops": fc.total, "ratio": ratio})


SELFCHECKS = (check_scan_equivalence, check_dt_fixed_point, check_sinkhorn_constraints, check_fast_init,
              check_gradients, check_reconciliation)


def run_selfcheck(fault: str | None = None) -> list[CheckResult]:
    from .mamba import inject_fault
    results = []
    if fault:
        with inject_fault(fault):
            for check in SELFCHECKS:
                results.append(check())
    else:
        results = [check() for check in SELFCHECKS]
    return results


def format_table(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  time     detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:6.2f}s  {r.detail}")
    return "\n".join(lines)


__all__ = ["CheckResult", "SELFCHECKS", "run_selfcheck", "format_table", "random_mamba", "init_iterations",
           "gradient_errors", "grad_cases", "moe_token_flops_all_experts"] + [c.__name__ for c in SELFCHECKS]
