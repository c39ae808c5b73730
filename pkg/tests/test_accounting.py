import numpy as np
import pytest

from blackmamba.accounting import (build_report, count_from_shapes, exact_count, mamba_flops_formula,
                                   mamba_param_terms, mamba_params_formula, moe_flops_formula, moe_param_terms,
                                   moe_params_formula, preset_report, symbolic_counts, measure_forward_flops)
from blackmamba.checks import moe_token_flops_all_experts
from blackmamba.model import ModelConfig, PRESETS, init_params, preset


def test_mamba_param_formula_unit_dims():
    # 3*1 + 2*1*(1 + 1 + 2/2) + 1 + 2 = 12
    assert mamba_params_formula(1, 1, 1, 1, 2) == 12


def test_mamba_param_formula_at_1152():
    D, I, H, dt, C = 1152, 2304, 16, 36, 4
    by_hand = 3 * I * D + 2 * I * (H + dt + C // 2) + I + 2 * D
    assert by_hand == 7_962_624 + 248_832 + 2_304 + 2_304 == 8_216_064
    assert mamba_params_formula(D, I, H, dt, C) == by_hand


def test_moe_param_and_flop_formulas():
    assert moe_params_formula(1152, 8) == 84_943_872
    assert mamba_flops_formula(1, 1, 2, 3, 1) == 82
    assert moe_flops_formula(4, 2) == 528


@pytest.mark.parametrize("name", [n for n in PRESETS if n.startswith("tiny")])
def test_exact_count_equals_shape_enumeration(name):
    cfg = preset(name)
    params = init_params(cfg, 0)
    assert exact_count(params)["total"] == count_from_shapes(cfg) == symbolic_counts(cfg)["total"]


def test_forward_params_drop_unused_experts():
    cfg = preset("tiny-mamba-moe")
    sym = symbolic_counts(cfg)
    per_expert = 3 * cfg.d_model * cfg.ffn_hidden
    assert sym["total"] - sym["forward"] == cfg.n_pairs * (cfg.n_experts - 1) * per_expert


@pytest.mark.parametrize("d_model,E", [(8, 1), (16, 4), (12, 3)])
def test_moe_flop_formula_matches_instrumented_standard_expert(d_model, E):
    cfg = ModelConfig(variant="mamba-moe", d_model=d_model, n_experts=E, ffn_hidden=4 * d_model,
                      expert_kind="standard", dtype="float64")
    moe = init_params(cfg, 0).pairs[0].channel
    fc = moe_token_flops_all_experts(moe, np.ones(d_model))
    assert fc.total == moe_flops_formula(d_model, E)


def test_reconciliation_residuals_close_and_stay_within_two_percent():
    cfg = preset("tiny-standard")
    for terms in (mamba_param_terms(cfg), moe_param_terms(cfg)):
        assert terms["closes"]
        assert terms["formula"] + terms["residual_total"] == terms["exact"]
    ratio = build_report(cfg, measure=False).discrepancy["formula/exact (blocks only)"]
    assert abs(ratio - 1) <= 0.02


def test_paper_presets_land_in_named_ranges():
    small = preset_report("340M/1.5B")
    assert 1.3e9 <= small.exact_params <= 1.7e9 and 300e6 <= small.forward_params <= 400e6
    big = preset_report("630M/2.8B")
    assert big.exact_params > small.exact_params and big.forward_params > small.forward_params


def test_measured_forward_flops_are_reported_for_tiny_configs():
    report = preset_report("tiny-mamba-moe", measure=True, batch=1, length=8)
    assert report.measured_flops and report.measured_flops > 0
    assert "formula/measured FLOPs" in report.discrepancy
    fc = measure_forward_flops(init_params(preset("tiny-mamba"), 0), 1, 8)
    assert fc.total == sum(fc.by_tag.values())
    assert '"exact_params"' in report.to_json() and "exact params" in report.table()
