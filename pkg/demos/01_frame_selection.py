"""Picking a small, diverse subset of a redundant frame stream.

Run: python3 demos/01_frame_selection.py
"""
import numpy as np

from flowsel.features import FrameRecord, distance_matrix, extract_features
from flowsel.oracles import random_frames
from flowsel.sampler import coverage_radius, random_select, uniform_select, wgs_select

rng = np.random.default_rng(0)

# A stream where every capture is repeated four times with tiny jitter,
# roughly what a parked or slow-moving vehicle produces.
base = random_frames(30, rng)
frames = []
for rec in base:
    for k in range(4):
        jitter = rng.normal(0, 0.05, size=3)
        frames.append(FrameRecord(f"{rec.id}_{k}", rec.t_us + 1000 * k, tuple(np.add(rec.pose, jitter))))

F = extract_features(frames)  # (n, 4): time, x, y, heading
D = distance_matrix(F)        # weighted l2, default weights 2, 1, 1, 0.5
print(f"{len(frames)} frames, feature matrix {F.shape}, diameter {D.max():.3f}")

m = 12
res = wgs_select(D, m)
print("greedy picks:", res.indices)
print("radius after each pick:", np.round(res.radius_trace, 3))

# Same budget, two baselines. The greedy subset leaves no frame far from a pick.
for name, idx in [("wgs", res.indices), ("random", random_select(len(frames), m, seed=0)),
                  ("uniform", uniform_select(len(frames), m))]:
    print(f"{name:8s} radius {coverage_radius(D, idx):.3f}")
