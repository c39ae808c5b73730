import json

import numpy as np
import pytest

from blackmamba import tensor as T
from blackmamba.checkpoint import load_checkpoint
from blackmamba.model import ModelConfig, init_params
from blackmamba.train import (Adam, TrainConfig, TrainingDiverged, copy_example, cosine_lr, loss_and_grads,
                              make_task_batch, recall_example, train_loop)

TINY = ModelConfig(n_layers=2, d_model=16, d_state=4, dt_rank=2, n_experts=2, ffn_hidden=16, vocab_size=16)


def test_copy_example_scores_the_reproduced_prefix():
    b = copy_example([5, 9, 2])
    assert b.inputs[0].tolist() == [5, 9, 2, 1, 5, 9]
    assert b.targets[0][b.mask[0]].tolist() == [5, 9, 2]


def test_recall_example_scores_the_queried_value():
    b = recall_example([(3, 40), (4, 50)], [4])
    assert b.targets[0][b.mask[0]].tolist() == [50]
    assert b.inputs[0][-1] == 4


@pytest.mark.parametrize("task", ["copy", "associative-recall"])
def test_batches_are_reproducible_and_in_vocab(task):
    a = make_task_batch(task, np.random.default_rng(3), 4, 64, 64)
    b = make_task_batch(task, np.random.default_rng(3), 4, 64, 64)
    assert a.inputs.shape == a.targets.shape == a.mask.shape == (4, 64)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.mask, b.mask)
    assert a.inputs.max() < 64 and a.targets.max() < 64 and a.mask.any()


def test_recall_targets_are_the_values_of_their_keys():
    b = make_task_batch("associative-recall", np.random.default_rng(0), 8, 64, 64)
    for row in range(8):
        seq, tgt, m = b.inputs[row], b.targets[row], b.mask[row]
        n_pairs = 64 // 8
        table = {int(seq[2 * i]): int(seq[2 * i + 1]) for i in range(n_pairs)}
        for t in np.flatnonzero(m):
            assert table[int(seq[t])] == int(tgt[t])


def test_unknown_task_and_bad_config():
    with pytest.raises(ValueError):
        make_task_batch("sort", np.random.default_rng(0), 1, 8, 8)
    with pytest.raises(ValueError, match=r"min_lr \(0.1\) exceeds peak_lr \(0.01\)"):
        TrainConfig(peak_lr=0.01, min_lr=0.1)
    with pytest.raises(ValueError):
        TrainConfig(weight_decay=-1)


def test_cosine_schedule_warmup_and_floor():
    assert cosine_lr(0, 1000, 1.0, 0.1) == pytest.approx(0.1)  # 1% warmup -> 10 steps
    assert cosine_lr(9, 1000, 1.0, 0.1) == pytest.approx(1.0)
    assert cosine_lr(999, 1000, 1.0, 0.1) == pytest.approx(0.1, abs=1e-4)
    lrs = [cosine_lr(s, 1000, 1.0, 0.1) for s in range(10, 1000)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_adam_step_moves_toward_quadratic_minimum():
    x = T.Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([x])
    for _ in range(200):
        x.grad = None
        with T.Tape() as tape:
            loss = T.tsum(x * x)
        tape.backward(loss)
        opt.step(0.05)
    assert np.all(np.abs(x.data) < 0.2)


def test_zero_lr_leaves_parameters_unchanged():
    params = init_params(TINY, 0)
    before = {k: v.data.copy() for k, v in params.tensors().items()}
    train_loop(TINY, TrainConfig(steps=3, peak_lr=0.0, min_lr=0.0, seq_len=8, batch_size=2), params=params)
    for k, v in params.tensors().items():
        assert np.array_equal(v.data, before[k]), k


def test_zero_steps_checkpoint_equals_initialisation(tmp_path):
    res = train_loop(TINY, TrainConfig(steps=0, seed=4), out_dir=tmp_path)
    loaded, _ = load_checkpoint(res.checkpoints[0])
    for (k, a), b in zip(init_params(TINY, 4).tensors().items(), loaded.tensors().values()):
        assert np.array_equal(a.data, b.data), k


def test_first_step_gradients_are_bit_identical_for_same_seed():
    grads = []
    for _ in range(2):
        params = init_params(TINY, 1)
        batch = make_task_batch("copy", np.random.default_rng(2), 4, 8, 16)
        loss_and_grads(params, batch, TrainConfig(seq_len=8))
        grads.append([t.grad.copy() for t in params.parameters() if t.grad is not None])
    assert all(np.array_equal(a, b) for a, b in zip(*grads))


def test_metrics_log_and_checkpoints(tmp_path):
    res = train_loop(TINY, TrainConfig(steps=6, log_every=2, checkpoint_every=3, seq_len=8, batch_size=2),
                     out_dir=tmp_path)
    records = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [0, 2, 4, 5]
    for r in records:
        assert {"step", "loss", "lr", "expert_counts"} <= set(r)
        assert r["unchosen_zero_grad"] is True
        assert all(sum(c) == 2 * 8 for c in r["expert_counts"].values())
    assert [p.rsplit("/", 1)[-1] for p in res.checkpoints] == ["ckpt_000003.bmc", "ckpt_000006.bmc"]


def test_nan_loss_aborts_with_diagnostic():
    params = init_params(TINY, 0)
    params.embed.data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="step 0"):
        train_loop(TINY, TrainConfig(steps=2, seq_len=8, batch_size=2), params=params)


def test_dense_variant_uses_the_same_loop():
    cfg = TINY.with_(variant="mamba")
    res = train_loop(cfg, TrainConfig(steps=2, seq_len=8, batch_size=2))
    assert "expert_counts" not in res.metrics[0]
