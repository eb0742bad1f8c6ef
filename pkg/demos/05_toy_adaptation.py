"""Adapting a frozen toy perception model with frames picked by each strategy.

A short run; the full comparison lives in the acceptance suite and in
``flowsel toy``. Run: python3 demos/05_toy_adaptation.py
"""
import numpy as np

from flowsel.scenegen import AdaptConfig, PretrainConfig, compare_strategies, final_eval, pretrain_frozen

# Train the backbone on the source domain, then freeze it and attach adapters.
pipe, info = pretrain_frozen(PretrainConfig(steps=150), return_curve=True)
print(f"source MSE {info['init_loss']:.4f} -> {info['final_loss']:.4f}")
print(f"trainable fraction after freezing {100 * pipe.trainable_fraction():.2f}%")

seeds = [0, 1, 2]
rows = compare_strategies(pipe, ["wgs", "random", "uniform"], 0.2, seeds, "redundancy", AdaptConfig(steps=30))
for strategy in ("wgs", "random", "uniform"):
    runs = [[r for r in rows if r["strategy"] == strategy and r["seed"] == s] for s in seeds]
    before = np.mean([run[0]["eval_mse"] for run in runs])
    after = np.mean([final_eval(run) for run in runs])
    radius = np.mean([run[0]["coverage_radius"] for run in runs])
    print(f"{strategy:8s} eval MSE {before:.4f} -> {after:.4f}   coverage radius {radius:.3f}")
