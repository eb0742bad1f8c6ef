"""Exact references on tiny instances: k-center optimum and transport distances.

Run: python3 demos/02_transport_oracles.py
"""
import numpy as np

from flowsel.oracles import (
    TransportInstance,
    campaign,
    exact_winf,
    exact_wp,
    kcenter_bruteforce,
    summarize,
    winf_cell_weighted,
)
from flowsel.sampler import wgs_select

# Three points on a line. Greedy keeps 0 and 10, which is also optimal.
x = np.array([0.0, 1.0, 10.0])
D = np.abs(x[:, None] - x[None, :])
sel = wgs_select(D, 2)
print("greedy", sel.indices, "radius", sel.coverage_radius)
print("optimum", kcenter_bruteforce(D, 2))

# Uniform mass on the subset: the point at 10 must receive half the mass
# but only owns a third, so some mass travels 9 units.
inst = TransportInstance.from_subset(D, sel.indices)
print(f"W1 {exact_wp(inst, 1):.4f}  W2 {exact_wp(inst, 2):.4f}  Winf {exact_winf(inst):.1f}")

# Weighting each kept point by the size of its cell removes that effect.
print("Winf with cell-weighted subset:", winf_cell_weighted(D, sel.indices))

# A seeded campaign over random instances.
summary = summarize(list(campaign(50, seed=0)))
print({k: (round(v, 4) if isinstance(v, float) else v) for k, v in summary.items()})
