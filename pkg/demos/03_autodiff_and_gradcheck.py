"""A tiny reverse-mode engine, checked against finite differences.

Run: python3 demos/03_autodiff_and_gradcheck.py
"""
import numpy as np

from flowsel import tensor as T
from flowsel.checks import run_checks

rng = np.random.default_rng(0)

# Fit a 3x3 convolution to a fixed random one.
x = T.Tensor(rng.normal(size=(4, 2, 8, 8)))
true_k = rng.normal(size=(3, 2, 3, 3))
target = T.conv2d(x, T.Tensor(true_k)).data

k = T.Param(np.zeros((3, 2, 3, 3)), name="k")
opt = T.SGD([k], lr=0.05, momentum=0.9)
for step in range(201):
    opt.zero_grad()
    loss = T.mse_loss(T.conv2d(x, k), target)
    loss.backward()
    opt.step()
    if step % 50 == 0:
        print(f"step {step:3d}  loss {loss.item():.3e}")
print("max kernel error", np.abs(k.data - true_k).max())

# Central differences on a random subset of coordinates.
err = T.grad_check(lambda: T.mse_loss(T.relu(T.conv2d(x, k)), target), [k])
print(f"conv + relu grad check, max rel error {err:.2e}")

for r in run_checks(["batchnorm", "dual_path", "fusion"]):
    print(f"{r['op']:12s} {r['max_rel_error']:.2e}  {'ok' if r['passed'] else 'FAILED'}")
