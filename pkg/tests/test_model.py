import numpy as np
import pytest

from blackmamba.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from blackmamba.model import (ModelConfig, PRESETS, decode_step, generate, init_generation_state, init_params,
                              model_forward, preset)
from blackmamba.tensor import np_layernorm

SMALL = dict(n_layers=4, d_model=16, d_state=4, dt_rank=2, n_experts=3, ffn_hidden=24, vocab_size=20,
             max_seq_len=64, n_heads=2, dtype="float64")
VARIANTS = ["mamba", "mamba-moe", "transformer", "transformer-moe"]


@pytest.mark.parametrize("variant", VARIANTS)
def test_decoding_matches_full_forward(variant):
    params = init_params(ModelConfig(variant=variant, **SMALL), seed=1)
    toks = np.random.default_rng(0).integers(0, 20, size=12)
    full = model_forward(params, toks).data
    state = init_generation_state(params)
    steps = np.stack([decode_step(params, state, int(t)) for t in toks])
    np.testing.assert_allclose(steps, full, atol=1e-10)


@pytest.mark.parametrize("variant", VARIANTS)
def test_batched_forward_equals_per_sequence(variant):
    params = init_params(ModelConfig(variant=variant, **SMALL), seed=2)
    toks = np.random.default_rng(1).integers(0, 20, size=(3, 7))
    batched = model_forward(params, toks).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], model_forward(params, toks[b]).data, atol=1e-12)


def test_zeroed_blocks_pass_embeddings_through():
    params = init_params(ModelConfig(variant="mamba-moe", **SMALL), seed=0)
    for name, t in params.tensors().items():
        if name.startswith("layers.") and not name.endswith("norm"):
            t.data = np.zeros_like(t.data)
    toks = np.arange(6)
    x = np_layernorm(params.embed.data[toks], params.final_norm.data)
    np.testing.assert_allclose(model_forward(params, toks).data, x @ params.embed.data.T, atol=1e-12)


@pytest.mark.parametrize("pair", [("mamba-moe", "mamba"), ("transformer-moe", "transformer")])
def test_single_expert_with_unit_gate_collapses_to_dense(pair):
    cfg = ModelConfig(variant=pair[0], **{**SMALL, "n_experts": 1})
    moe = init_params(cfg, seed=7)
    dense = init_params(cfg.with_(variant=pair[1]), seed=7)
    toks = np.random.default_rng(0).integers(0, 20, size=(2, 9))
    a = model_forward(moe, toks, routing="sinkhorn", gate="one").data
    b = model_forward(dense, toks).data
    assert np.array_equal(a, b)


def test_same_seed_same_parameters_and_different_seed_differs():
    cfg = ModelConfig(**SMALL)
    a, b, c = init_params(cfg, 3), init_params(cfg, 3), init_params(cfg, 4)
    for (k, x), y, z in zip(a.tensors().items(), b.tensors().values(), c.tensors().values()):
        assert np.array_equal(x.data, y.data), k
    assert not np.array_equal(a.embed.data, c.embed.data)


def test_mamba_a_initialisation():
    params = init_params(ModelConfig(**SMALL), seed=0)
    A = np.exp(params.pairs[0].mixer.ln_A.data)
    np.testing.assert_allclose(A, np.tile(np.arange(1, 5), (A.shape[0], 1)), rtol=1e-12)
    dt = np.log1p(np.exp(params.pairs[0].mixer.dt_bias.data))
    assert dt.min() >= 0.001 - 1e-12 and dt.max() <= 0.1 + 1e-12


def test_init_std_scales_projections_only():
    base = ModelConfig(**SMALL)
    a, b = init_params(base, 0), init_params(base.with_(init_std=0.1), 0)
    np.testing.assert_allclose(b.pairs[0].mixer.W_B.data, 5 * a.pairs[0].mixer.W_B.data, rtol=1e-12)
    np.testing.assert_allclose(b.embed.data, 5 * a.embed.data, rtol=1e-12)
    # A, dt and norms do not depend on the projection scale
    assert np.array_equal(a.pairs[0].mixer.ln_A.data, b.pairs[0].mixer.ln_A.data)
    assert np.array_equal(a.pairs[0].mixer.dt_bias.data, b.pairs[0].mixer.dt_bias.data)
    with pytest.raises(ValueError, match="init_std"):
        base.with_(init_std=0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n_layers=3)
    with pytest.raises(ValueError):
        ModelConfig(variant="rnn")
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"d_modle": 3})
    with pytest.raises(KeyError):
        preset("huge")
    assert set(PRESETS) >= {"tiny-mamba-moe", "340M/1.5B", "630M/2.8B"}


def test_out_of_range_tokens_rejected():
    params = init_params(ModelConfig(**SMALL), seed=0)
    with pytest.raises(ValueError):
        model_forward(params, np.array([0, 20]))
    with pytest.raises(ValueError):
        decode_step(params, init_generation_state(params), -1)


def test_generate_greedy_is_deterministic_and_sampling_is_seeded():
    params = init_params(ModelConfig(**SMALL), seed=0)
    assert generate(params, [1, 2], 5) == generate(params, [1, 2], 5)
    a = generate(params, [1], 6, mode="temperature", seed=3)
    assert a == generate(params, [1], 6, mode="temperature", seed=3) and len(a) == 7
    with pytest.raises(ValueError):
        generate(params, [], 3)


@pytest.mark.parametrize("variant", VARIANTS)
def test_checkpoint_round_trip_is_bit_exact(tmp_path, variant):
    params = init_params(ModelConfig(variant=variant, **{**SMALL, "dtype": "float32"}), seed=5)
    for t in params.parameters():
        t.data = t.data + np.float32(0.25)
    path = save_checkpoint(tmp_path / "m.bmc", params, {"step": 3})
    loaded, meta = load_checkpoint(path)
    assert meta == {"step": 3} and loaded.config == params.config
    for (k, a), b in zip(params.tensors().items(), loaded.tensors().values()):
        assert a.data.dtype == b.data.dtype and np.array_equal(a.data, b.data), k
    header, start = read_header(path)
    assert start % 8 == 0 and all(e["dtype"].startswith("<") for e in header["tensors"])


def test_checkpoint_rejects_foreign_files(tmp_path):
    bad = tmp_path / "x.bmc"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


@pytest.mark.parametrize("variant", ["mamba-moe", "transformer-moe"])
def test_full_model_gradient(variant):
    from blackmamba.checks import grad_cases, gradient_errors
    fn, tensors = grad_cases(2)[f"tiny {variant} loss"]
    assert gradient_errors(fn, tensors, n_coords=60, seed=2)["max_rel_err"] < 1e-4
