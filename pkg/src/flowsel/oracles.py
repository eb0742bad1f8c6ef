"""Exact small-instance references for the sampler.

* brute-force k-center radius (the optimum the greedy selection is compared to)
* exact W-infinity between uniform empirical measures, via thresholded max-flow
* exact W_1 / W_2 via min-cost flow on the integer-scaled transportation graph
* verifiers that bundle these into per-instance reports
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from .errors import InstanceTooLarge
from .features import FrameRecord, as_weights, distance_matrix, extract_features, weighted_distance
from .sampler import wgs_select

MAX_SUBSETS = 200_000
MAX_MASS_UNITS = 1_000_000
MAX_WP_CELLS = 10_000
BOUND_SLACK = 1e-9


@dataclass(frozen=True)
class TransportInstance:
    """Uniform source (rows) and target (columns) measures with ground costs."""

    cost: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cost, dtype=np.float64)
        if c.ndim != 2 or c.size == 0:
            raise ValueError("cost must be a non-empty 2-D array")
        if not np.all(np.isfinite(c)) or np.any(c < 0):
            raise ValueError("costs must be finite and nonnegative")
        object.__setattr__(self, "cost", c)

    @property
    def n(self) -> int:
        return self.cost.shape[0]

    @property
    def m(self) -> int:
        return self.cost.shape[1]

    @classmethod
    def from_subset(cls, D, subset) -> "TransportInstance":
        """Full data (rows) against a selected subset (columns)."""
        return cls(np.asarray(D, dtype=np.float64)[:, list(subset)])

    def mass_units(self) -> tuple:
        L = math.lcm(self.n, self.m)
        if L > MAX_MASS_UNITS:
            raise InstanceTooLarge(f"lcm({self.n}, {self.m}) = {L} exceeds {MAX_MASS_UNITS} mass units")
        return L, L // self.n, L // self.m


@dataclass
class OracleReport:
    n: int
    m: int
    greedy_radius: float
    optimal_radius: float
    ratio: float
    w_inf: float
    w1: float
    w2: float
    w_inf_cell: float
    bound_holds: bool
    greedy_subset: list
    optimal_subset: list

    def to_json(self) -> dict:
        return asdict(self)


def kcenter_bruteforce(D, m: int):
    """Optimal ``m``-center subset by exhaustive enumeration.

    Returns ``(subset, radius)``; among optimal subsets the lexicographically
    smallest is kept.
    """
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    if m < 1 or m > n:
        raise ValueError(f"m={m} must satisfy 1 <= m <= n={n}")
    if math.comb(n, m) > MAX_SUBSETS:
        raise InstanceTooLarge(f"C({n}, {m}) = {math.comb(n, m)} subsets exceeds {MAX_SUBSETS}")
    best, best_r = None, math.inf
    for subset in itertools.combinations(range(n), m):
        r = D[:, subset].min(axis=1).max()
        if r < best_r:
            best, best_r = subset, r
    return best, float(best_r)


def _feasible(cost: np.ndarray, theta: float, supply: np.ndarray, demand: np.ndarray) -> bool:
    n, m = cost.shape
    src, sink = 0, n + m + 1
    rows_i, cols_j = np.nonzero(cost <= theta)
    total = int(supply.sum())
    # layout: source, n sources, m targets, sink
    tails = np.concatenate([np.zeros(n, np.int64), 1 + rows_i, 1 + n + np.arange(m)])
    heads = np.concatenate([1 + np.arange(n), 1 + n + cols_j, np.full(m, sink)])
    caps = np.concatenate([supply, np.full(rows_i.size, total), demand]).astype(np.int32)
    graph = csr_matrix((caps, (tails, heads)), shape=(n + m + 2, n + m + 2))
    return maximum_flow(graph, src, sink).flow_value == total


def _bottleneck(cost: np.ndarray, supply: np.ndarray, demand: np.ndarray) -> float:
    levels = np.unique(cost)
    lo, hi = 0, levels.size - 1
    # feasibility is monotone in the threshold; the largest cost is always feasible
    while lo < hi:
        mid = (lo + hi) // 2
        if _feasible(cost, levels[mid], supply, demand):
            hi = mid
        else:
            lo = mid + 1
    return float(levels[lo])


def exact_winf(inst: TransportInstance) -> float:
    """Smallest threshold admitting a full coupling of the two uniform measures."""
    L, a, b = inst.mass_units()
    return _bottleneck(inst.cost, np.full(inst.n, a), np.full(inst.m, b))


def winf_cell_weighted(D, subset) -> float:
    """W-infinity from the uniform full measure to the subset weighted by cell mass.

    Each selected point carries the share of points whose nearest selected
    point it is (lowest index on ties). Unlike the uniform subset measure,
    this one always lies within the coverage radius.
    """
    inst = TransportInstance.from_subset(D, subset)
    nearest = np.argmin(inst.cost, axis=1)
    counts = np.bincount(nearest, minlength=inst.m)
    return _bottleneck(inst.cost, np.ones(inst.n, np.int64), counts)


def min_cost_transport(cost, supply, demand):
    """Integer transportation problem by successive shortest paths.

    ``supply`` and ``demand`` are integer vectors with equal sums. Shortest
    paths are found with dense Bellman-Ford on the residual graph, which
    tolerates the negative reverse-arc costs. Returns the ``(n, m)`` integer
    flow.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    supply = np.array(supply, dtype=np.int64)
    demand = np.array(demand, dtype=np.int64)
    if supply.sum() != demand.sum():
        raise ValueError("supply and demand totals differ")
    flow = np.zeros((n, m), dtype=np.int64)
    scale = max(1.0, float(cost.max()))
    tol = 1e-12 * scale
    while supply.sum() > 0:
        dist_l = np.where(supply > 0, 0.0, np.inf)
        pred_l = np.full(n, -1)
        dist_r = np.full(m, np.inf)
        pred_r = np.full(m, -1)
        for _ in range(n + m + 1):
            cand_r = dist_l[:, None] + cost
            best_i = np.argmin(cand_r, axis=0)
            best_r = cand_r[best_i, np.arange(m)]
            upd_r = best_r < dist_r - tol
            dist_r = np.where(upd_r, best_r, dist_r)
            pred_r = np.where(upd_r, best_i, pred_r)
            # reverse arcs j -> i exist where flow is positive
            cand_l = np.where(flow > 0, dist_r[None, :] - cost, np.inf)
            best_j = np.argmin(cand_l, axis=1)
            best_l = cand_l[np.arange(n), best_j]
            upd_l = best_l < dist_l - tol
            if not upd_l.any() and not upd_r.any():
                break
            dist_l = np.where(upd_l, best_l, dist_l)
            pred_l = np.where(upd_l, best_j, pred_l)
        open_r = np.where(demand > 0, dist_r, np.inf)
        j = int(np.argmin(open_r))
        # walk back to the originating source, collecting arcs
        fwd, back = [], []
        jj = j
        while True:
            i = int(pred_r[jj])
            fwd.append((i, jj))
            if pred_l[i] < 0:
                break
            jj = int(pred_l[i])
            back.append((i, jj))
        i0 = fwd[-1][0]
        amount = min(supply[i0], demand[j])
        for i, jj in back:
            amount = min(amount, flow[i, jj])
        for i, jj in fwd:
            flow[i, jj] += amount
        for i, jj in back:
            flow[i, jj] -= amount
        supply[i0] -= amount
        demand[j] -= amount
    return flow


def exact_wp(inst: TransportInstance, p: float = 1) -> float:
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    if inst.n * inst.m > MAX_WP_CELLS:
        raise InstanceTooLarge(f"{inst.n}x{inst.m} exceeds {MAX_WP_CELLS} transport cells")
    L, a, b = inst.mass_units()
    c = inst.cost ** p
    flow = min_cost_transport(c, np.full(inst.n, a), np.full(inst.m, b))
    total = float((flow * c).sum())
    return (total / L) ** (1.0 / p)


def verify_instance(D, features=None, m: int = 1) -> OracleReport:
    """Compare greedy selection against the brute-force optimum and W-inf.

    ``bound_holds`` requires both the factor-2 radius bound and
    ``w_inf <= greedy_radius``. The second part can fail: with a uniform
    subset measure, mass from a crowded cell may have to travel to a far
    center (the 3-point line gives ``w_inf = 9`` against radius 1).
    ``w_inf_cell`` is the cell-weighted variant, which never exceeds the
    radius. ``features`` is accepted for provenance only; all quantities
    come from ``D``.
    """
    D = np.asarray(D, dtype=np.float64)
    sel = wgs_select(D, m)
    opt_subset, opt_r = kcenter_bruteforce(D, m)
    inst = TransportInstance.from_subset(D, sel.indices)
    w_inf = exact_winf(inst)
    w1 = exact_wp(inst, 1)
    w2 = exact_wp(inst, 2)
    w_cell = winf_cell_weighted(D, sel.indices)
    g = sel.coverage_radius
    if opt_r > 0:
        ratio = g / opt_r
    else:
        ratio = 1.0 if g == 0 else math.inf
    holds = ratio <= 2 + BOUND_SLACK and w_inf <= g + BOUND_SLACK
    return OracleReport(
        n=D.shape[0], m=m, greedy_radius=g, optimal_radius=opt_r, ratio=ratio,
        w_inf=w_inf, w1=w1, w2=w2, w_inf_cell=w_cell, bound_holds=bool(holds),
        greedy_subset=[int(i) for i in sel.indices], optimal_subset=[int(i) for i in opt_subset],
    )


def verify_metric(features, w=None, trials: int = 10_000, seed: int = 0) -> bool:
    """Sampled check of symmetry, identity and the triangle inequality."""
    F = np.asarray(features, dtype=np.float64)
    n = F.shape[0]
    if n < 3:
        raise ValueError("need at least 3 features")
    w = as_weights(w)
    rng = np.random.default_rng(seed)
    triples = rng.integers(0, n, size=(trials, 3))
    for a, b, c in triples:
        fa, fb, fc = F[a], F[b], F[c]
        dab = weighted_distance(fa, fb, w)
        if dab != weighted_distance(fb, fa, w):
            return False
        if weighted_distance(fa, fa, w) != 0.0:
            return False
        dac = weighted_distance(fa, fc, w)
        dbc = weighted_distance(fb, fc, w)
        scale = max(dab, dbc, dac, 1.0)
        if dac > dab + dbc + 1e-12 * scale:
            return False
    return True


def random_frames(n: int, rng: np.random.Generator, span_us: int = 5_000_000, extent: float = 50.0):
    """Random manifest rows for oracle campaigns."""
    ts = np.sort(rng.integers(0, span_us, size=n))
    poses = rng.uniform(-extent, extent, size=(n, 3))
    return [FrameRecord(f"f{i:05d}", int(ts[i]), tuple(float(v) for v in poses[i])) for i in range(n)]


def campaign(instances: int, n_range=(6, 12), m_range=(2, 4), seed: int = 0, w=None):
    """Run ``verify_instance`` on seeded random instances.

    Yields one report dict per instance; the caller aggregates the summary.
    """
    rng = np.random.default_rng(seed)
    for k in range(instances):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        m = int(rng.integers(m_range[0], min(m_range[1], n) + 1))
        F = extract_features(random_frames(n, rng))
        D = distance_matrix(F, w)
        rep = verify_instance(D, F, m).to_json()
        rep["instance"] = k
        yield rep


def summarize(reports) -> dict:
    ratios = [r["ratio"] for r in reports]
    return {
        "instances": len(reports),
        "violations": sum(1 for r in reports if not r["bound_holds"]),
        "ratio_violations": sum(1 for r in ratios if r > 2 + BOUND_SLACK),
        "winf_violations": sum(1 for r in reports if r["w_inf"] > r["greedy_radius"] + BOUND_SLACK),
        "max_ratio": max(ratios) if ratios else None,
        "mean_ratio": float(np.mean(ratios)) if ratios else None,
    }
