"""Decode state size: a Mamba-MoE model carries a fixed-size recurrent state,
a transformer carries a KV cache that grows with every token.

    python3 demos/streaming_vs_kv_cache.py
"""

import numpy as np

from blackmamba import decode_step, init_generation_state, init_params, model_forward, preset

for variant in ("mamba-moe", "transformer"):
    cfg = preset("tiny-mamba-moe").with_(variant=variant, dtype="float64")
    params = init_params(cfg, seed=0)
    tokens = np.random.default_rng(0).integers(0, cfg.vocab_size, size=64)

    state = init_generation_state(params, capacity=64)
    sizes, last = [], None
    for pos, tok in enumerate(tokens):
        last = decode_step(params, state, int(tok))
        if pos + 1 in (1, 16, 64):
            sizes.append(f"{pos + 1:>3} tokens: {state.nbytes:>7} bytes")

    # the last decode step must reproduce the full-sequence forward pass
    full = model_forward(params, tokens).data[-1]
    print(f"{variant}: max |decode - forward| = {np.abs(last - full).max():.2e}")
    for line in sizes:
        print("   ", line)
