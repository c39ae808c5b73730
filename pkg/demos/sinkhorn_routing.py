"""Sinkhorn routing balances experts across a batch where plain argmax does not.

    python3 demos/sinkhorn_routing.py
"""

import numpy as np

from blackmamba import sinkhorn

rng = np.random.default_rng(0)
S, N = 256, 8
# a router that strongly prefers expert 0
logits = rng.normal(size=(S, N))
logits[:, 0] += 1.5

print("argmax counts:  ", np.bincount(logits.argmax(1), minlength=N))
for init in ("fast", "uniform"):
    plan = sinkhorn(logits, temperature=2.0, init=init, tol=1e-3)
    print(f"sinkhorn {init:<7}:", np.bincount(plan.expert_of, minlength=N),
          f"iters={plan.iters_used} residual={plan.residual:.1e}")

plan = sinkhorn(logits)
print("row sums ~ 1:      ", np.allclose(plan.pi.sum(1), 1, atol=1e-3))
print("column sums ~ S/N: ", np.allclose(plan.pi.sum(0), S / N, rtol=1e-3))
