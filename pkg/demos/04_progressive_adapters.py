"""Adapters at three depths, linked by a detached feature memory.

Run: python3 demos/04_progressive_adapters.py
"""
import numpy as np

from flowsel import tensor as T
from flowsel.adapt import FeatureMemory, GatingCoefficient, KTPro, adapt_stage

rng = np.random.default_rng(0)

# The gate maps any raw value into (0.1, 0.5).
g = GatingCoefficient()
for raw in (-20.0, 0.0, 20.0):
    g.raw.data[...] = raw
    print(f"raw {raw:6.1f} -> alpha {g.alpha().item():.4f}")

kt = KTPro(8, 8, seed=0)
counts = kt.stage_param_counts()
print("trainable parameters per stage:", counts)

f_early = T.Tensor(rng.normal(size=(2, 8, 8, 8)))
f_mid = T.Tensor(rng.normal(size=(2, 8, 4, 4)))
target = rng.normal(size=(2, 8, 4, 4))

mem = FeatureMemory()
adapt_stage("early", f_early, mem, kt)          # writes the memory
h = adapt_stage("middle", f_mid, mem, kt)       # reads it, injects
out = adapt_stage("late", h, mem, kt)
loss = T.mse_loss(out, target)
loss.backward()

# The memory is detached, so the early adapters get no gradient from the
# later stages. The shared compressor sits after the read and does.
early = [p for b in kt.early.blocks() for p in b.parameters()]
comp = kt.early.compressor.parameters()
print("early adapter grad norm", sum(float(np.abs(p.grad).sum()) if p.grad is not None else 0.0 for p in early))
print("compressor grad norm   ", sum(float(np.abs(p.grad).sum()) for p in comp if p.grad is not None))
