"""Spatio-temporal frame features and the weighted ground metric.

Each frame becomes a row ``[f_t, f_x, f_y, f_s]``:

* ``f_t``: seconds since the first frame (``t_us / 1e6``), or since the epoch
  when ``timestamp_mode="absolute"``.
* ``f_x, f_y``: dataset-wide min-max projection of the pose ``(x, y)`` onto
  ``[-1, 1]``. A coordinate with zero range maps to 0; ``z`` is dropped.
* ``f_s``: 1-based manifest position divided by ``n``.

Feature sets are plain ``(n, 4)`` float64 arrays and distance matrices are
``(n, n)`` float64 arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import EmptyDataset, InstanceTooLarge, InvalidRecord, ManifestError

TAU = 1e6
DEFAULT_WEIGHTS = (2.0, 1.0, 1.0, 0.5)
MAX_FRAMES = 20_000
TIMESTAMP_MODES = ("relative", "absolute")


@dataclass(frozen=True)
class FrameRecord:
    id: str
    t_us: int
    pose: tuple
    payload_path: Optional[str] = None

    def to_json(self) -> dict:
        row = {"id": self.id, "t_us": self.t_us, "pose": list(self.pose)}
        if self.payload_path is not None:
            row["payload_path"] = self.payload_path
        return row


@dataclass(frozen=True)
class WeightVector:
    w_t: float = DEFAULT_WEIGHTS[0]
    w_x: float = DEFAULT_WEIGHTS[1]
    w_y: float = DEFAULT_WEIGHTS[2]
    w_s: float = DEFAULT_WEIGHTS[3]

    def __post_init__(self):
        vals = self.as_tuple()
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError(f"weights must be finite and nonnegative, got {vals}")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one weight must be positive")

    def as_tuple(self) -> tuple:
        return (self.w_t, self.w_x, self.w_y, self.w_s)

    @classmethod
    def parse(cls, text: str) -> "WeightVector":
        """Parse ``"w_t,w_x,w_y,w_s"``."""
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 4:
            raise ValueError(f"expected 4 comma-separated weights, got {text!r}")
        return cls(*parts)


def as_weights(w) -> WeightVector:
    if w is None:
        return WeightVector()
    if isinstance(w, WeightVector):
        return w
    return WeightVector(*[float(v) for v in w])


def extract_features(frames: Sequence[FrameRecord], timestamp_mode: str = "relative") -> np.ndarray:
    """Map frame records to an ``(n, 4)`` feature array, rows in input order."""
    if timestamp_mode not in TIMESTAMP_MODES:
        raise ValueError(f"timestamp_mode must be one of {TIMESTAMP_MODES}")
    n = len(frames)
    if n == 0:
        raise EmptyDataset("no frames to featurize")

    t = np.empty(n, dtype=np.int64)
    xy = np.empty((n, 2), dtype=np.float64)
    for i, fr in enumerate(frames):
        if not isinstance(fr.t_us, (int, np.integer)) or isinstance(fr.t_us, bool):
            raise InvalidRecord(fr.id, "timestamp must be an integer")
        if len(fr.pose) != 3 or not all(math.isfinite(float(v)) for v in fr.pose):
            raise InvalidRecord(fr.id, "pose must be 3 finite numbers")
        t[i] = fr.t_us
        xy[i] = (float(fr.pose[0]), float(fr.pose[1]))

    feats = np.empty((n, 4), dtype=np.float64)
    # integer subtraction first keeps microsecond precision
    t0 = t.min() if timestamp_mode == "relative" else 0
    feats[:, 0] = (t - t0) / TAU
    for col in range(2):
        lo, hi = xy[:, col].min(), xy[:, col].max()
        if hi > lo:
            proj = 2.0 * (xy[:, col] - lo) / (hi - lo) - 1.0
            feats[:, 1 + col] = np.clip(proj, -1.0, 1.0)
        else:
            feats[:, 1 + col] = 0.0
    feats[:, 3] = np.arange(1, n + 1) / n
    return feats


def weighted_distance(f_i, f_j, w=None) -> float:
    """Weighted l2 distance between two feature vectors."""
    wt, wx, wy, ws = as_weights(w).as_tuple()
    a = np.asarray(f_i, dtype=np.float64)
    b = np.asarray(f_j, dtype=np.float64)
    d = a - b
    # fixed summation order, shared with distance_matrix
    total = wt * d[0] * d[0] + wx * d[1] * d[1] + wy * d[2] * d[2] + ws * d[3] * d[3]
    return float(np.sqrt(total))


def distance_matrix(features, w=None, chunk: int = 1024) -> np.ndarray:
    """Full ``(n, n)`` matrix of :func:`weighted_distance` values.

    Rows are filled in chunks; each unordered pair is evaluated once on the
    upper triangle and mirrored, so symmetry and the zero diagonal are exact.
    """
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] == 0:
        raise EmptyDataset("no features")
    n = F.shape[0]
    if n > MAX_FRAMES:
        raise InstanceTooLarge(f"{n} frames exceeds the {MAX_FRAMES}-frame limit")
    wt, wx, wy, ws = as_weights(w).as_tuple()
    D = np.zeros((n, n), dtype=np.float64)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        d = F[start:stop, None, :] - F[None, start:, :]
        block = np.sqrt(
            wt * d[..., 0] * d[..., 0]
            + wx * d[..., 1] * d[..., 1]
            + wy * d[..., 2] * d[..., 2]
            + ws * d[..., 3] * d[..., 3]
        )
        D[start:stop, start:] = block
    iu = np.triu_indices(n, k=1)
    D[(iu[1], iu[0])] = D[iu]
    np.fill_diagonal(D, 0.0)
    return D


def read_manifest(path) -> list:
    """Read a JSON Lines manifest; blank lines are skipped."""
    frames = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(lineno, f"malformed JSON ({exc.msg})") from None
            frames.append(_record_from_row(row, lineno))
            if frames[-1].id in seen:
                raise ManifestError(lineno, f"duplicate id {frames[-1].id!r}")
            seen.add(frames[-1].id)
    if not frames:
        raise EmptyDataset(f"manifest {path} has no frames")
    return frames


def _record_from_row(row, lineno) -> FrameRecord:
    if not isinstance(row, dict):
        raise ManifestError(lineno, "expected a JSON object")
    try:
        rid = row["id"]
        t_us = row["t_us"]
        pose = row["pose"]
    except KeyError as exc:
        raise ManifestError(lineno, f"missing field {exc.args[0]!r}") from None
    if not isinstance(rid, str):
        raise ManifestError(lineno, "id must be a string")
    if not isinstance(t_us, int) or isinstance(t_us, bool) or t_us < 0:
        raise ManifestError(lineno, "t_us must be a nonnegative integer")
    if not isinstance(pose, list) or len(pose) != 3:
        raise ManifestError(lineno, "pose must be a list of 3 numbers")
    try:
        pose = tuple(float(v) for v in pose)
    except (TypeError, ValueError):
        raise ManifestError(lineno, "pose must be a list of 3 numbers") from None
    if not all(math.isfinite(v) for v in pose):
        raise ManifestError(lineno, "pose must be finite")
    payload = row.get("payload_path")
    if payload is not None and not isinstance(payload, str):
        raise ManifestError(lineno, "payload_path must be a string")
    return FrameRecord(rid, t_us, pose, payload)


def write_manifest(frames: Iterable[FrameRecord], path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for fr in frames:
            fh.write(json.dumps(fr.to_json()) + "\n")
