"""Train tiny Mamba-MoE on the copy task and watch loss and expert balance.

Takes about a minute on one core.

    python3 demos/train_copy.py
"""

from blackmamba import preset
from blackmamba.train import TrainConfig, evaluate, train_loop

cfg = preset("tiny-mamba-moe").with_(vocab_size=16, init_std=0.1)
tcfg = TrainConfig(task="copy", steps=2000, batch_size=16, seq_len=16, log_every=250)

result = train_loop(cfg, tcfg)
for m in result.metrics:
    counts = m.get("expert_counts", {}).get("0")
    print(f"step {m['step']:>5}  loss {m['loss_ema']:.3f}  lr {m['lr']:.2e}  layer-0 experts {counts}")

ev = evaluate(result.params, tcfg)
print(f"loss {result.initial_loss:.3f} -> {result.final_loss:.3f}; held-out accuracy {ev['accuracy']:.3f}")
