"""Wasserstein greedy sampling: medoid-seeded farthest-first selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidBudget, InvalidRatio, InvalidSubset
from .features import as_weights, distance_matrix, extract_features


@dataclass(frozen=True)
class SelectionResult:
    """Selected indices in selection order plus the residual-radius trace."""

    indices: tuple
    coverage_radius: float
    radius_trace: tuple
    m: int
    extra: dict = field(default_factory=dict, compare=False)

    def to_json(self, frames=None, alpha=None, weights=None) -> dict:
        out = {
            "indices": [int(i) for i in self.indices],
            "m": self.m,
            "coverage_radius": self.coverage_radius,
            "radius_trace": list(self.radius_trace),
        }
        if frames is not None:
            out["ids"] = [frames[i].id for i in self.indices]
        if alpha is not None:
            out["alpha"] = alpha
        if weights is not None:
            out["weights"] = list(as_weights(weights).as_tuple())
        return out


def medoid_seed(D: np.ndarray) -> int:
    """Index whose mean distance is closest to the median mean distance.

    For even ``n`` the lower middle value is used as the median; ties go to
    the lowest index.
    """
    n = D.shape[0]
    mu = D.sum(axis=1) / n
    med = np.sort(mu)[(n - 1) // 2]
    return int(np.argmin(np.abs(mu - med)))


def wgs_select(D, m: int) -> SelectionResult:
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    if not isinstance(m, (int, np.integer)) or m < 1 or m > n:
        raise InvalidBudget(f"budget m={m} must satisfy 1 <= m <= n={n}")

    first = medoid_seed(D)
    selected = [first]
    in_s = np.zeros(n, dtype=bool)
    in_s[first] = True
    r = D[first].copy()
    trace = [float(r.max())]
    while len(selected) < m:
        # selected points already have r == 0; mask anyway so zero-distance
        # duplicates can never re-select a member
        cand = np.where(in_s, -np.inf, r)
        s = int(np.argmax(cand))
        selected.append(s)
        in_s[s] = True
        np.minimum(r, D[s], out=r)
        trace.append(float(r.max()))
    return SelectionResult(tuple(selected), trace[-1], tuple(trace), m)


def coverage_radius(D, subset) -> float:
    D = np.asarray(D, dtype=np.float64)
    idx = np.asarray(list(subset), dtype=np.int64)
    if idx.size == 0:
        raise InvalidSubset("subset must be non-empty")
    if idx.min() < 0 or idx.max() >= D.shape[0]:
        raise InvalidSubset(f"subset indices must lie in [0, {D.shape[0]})")
    return float(D[:, idx].min(axis=1).max())


def budget_from_ratio(n: int, alpha: float) -> int:
    """``floor(alpha * n)`` clamped to at least 1."""
    if not (isinstance(alpha, (int, float)) and math.isfinite(alpha) and 0 < alpha <= 1):
        raise InvalidRatio(f"ratio must lie in (0, 1], got {alpha!r}")
    return max(1, math.floor(alpha * n))


def select_ratio(frames, alpha: float, w=None, timestamp_mode: str = "relative") -> SelectionResult:
    """Featurize ``frames`` and pick ``floor(alpha * n)`` of them with WGS."""
    m = budget_from_ratio(len(frames), alpha)
    F = extract_features(frames, timestamp_mode=timestamp_mode)
    D = distance_matrix(F, w)
    return wgs_select(D, m)


def random_select(n: int, m: int, seed: int) -> tuple:
    """Seeded uniform choice without replacement.

    Uses a prefix of one permutation so larger budgets extend smaller ones.
    """
    if m < 1 or m > n:
        raise InvalidBudget(f"budget m={m} must satisfy 1 <= m <= n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return tuple(int(i) for i in perm[:m])


def uniform_select(n: int, m: int) -> tuple:
    """Fixed temporal stride ``n / m`` starting at frame 0."""
    if m < 1 or m > n:
        raise InvalidBudget(f"budget m={m} must satisfy 1 <= m <= n={n}")
    return tuple((k * n) // m for k in range(m))
