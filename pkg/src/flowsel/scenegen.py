"""Synthetic multi-agent BEV scenes and the toy adaptation experiment.

A smooth random occupancy field is observed by ``n_agents`` agents moving
in formation. Each agent sees a noisy, range-limited local grid; the ego
agent's full-grid occupancy is the regression target. Every trajectory step
is emitted ``duplication_factor`` times with small pose jitter and mostly
repeated sensor noise, which is the redundancy the sampler is meant to remove.

The toy pipeline mirrors the collaborative detector layout: frozen encoder,
early adapters (+ memory and prompts), frozen multi-scale encoder, middle
adapter, warp to ego, fusion, late adapter, frozen decoder head.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .adapt import FeatureMemory, KTPro, StageConfig, adapt_stage
from .errors import InvalidRatio, ShapeError
from .features import DEFAULT_WEIGHTS, FrameRecord, distance_matrix, extract_features
from .sampler import budget_from_ratio, coverage_radius, random_select, uniform_select, wgs_select

STRATEGIES = ("wgs", "random", "uniform")
METRIC_COLUMNS = ("strategy", "alpha", "seed", "step", "train_mse", "eval_mse", "coverage_radius", "trainable_fraction")


@dataclass(frozen=True)
class SceneConfig:
    grid: int = 16
    n_agents: int = 3
    n_frames: int = 20  # distinct trajectory steps; the stream holds n_frames * duplication_factor frames
    duplication_factor: int = 1
    field_freq: float = 0.25  # rad per grid cell
    noise_std: float = 0.05
    obs_gain: float = 1.0
    seed: int = 0
    n_waves: int = 12
    speed: float = 3.0  # grid cells per trajectory step
    turn_std: float = 0.35
    formation_radius: float = 5.0
    visibility_radius: float = 6.0
    pose_jitter: float = 0.05
    yaw_jitter: float = 0.01
    dup_noise: float = 0.1  # share of a duplicate's sensor noise that is fresh; the rest repeats the step's draw
    step_us: int = 500_000
    dup_us: int = 100_000
    cell_m: float = 1.0

    def __post_init__(self):
        if self.duplication_factor < 1:
            raise ValueError("duplication_factor must be >= 1")
        g = self.grid
        if g < 8 or g & (g - 1):
            raise ValueError("grid must be a power of two >= 8")
        if not 0 <= self.dup_noise <= 1:
            raise ValueError("dup_noise must lie in [0, 1]")
        if self.n_agents < 1 or self.n_frames < 1:
            raise ValueError("need at least one agent and one frame")

    def to_json(self) -> dict:
        return asdict(self)


SOURCE_DOMAIN = dict(field_freq=0.18, noise_std=0.05, obs_gain=1.0)
TARGET_DOMAIN = dict(field_freq=0.32, noise_std=0.15, obs_gain=0.7)


def preset(name: str, seed: int = 0, **overrides) -> SceneConfig:
    """Named scene presets.

    ``source``: pretraining domain. ``plain``: target domain, no duplication.
    ``redundancy``: target domain, every step emitted five times.
    ``eval``: held-out target-domain stream.
    """
    base = {
        "source": dict(SOURCE_DOMAIN, n_frames=64, duplication_factor=1),
        "plain": dict(TARGET_DOMAIN, n_frames=100, duplication_factor=1),
        "redundancy": dict(TARGET_DOMAIN, n_frames=20, duplication_factor=5),
        "eval": dict(TARGET_DOMAIN, n_frames=24, duplication_factor=1),
    }
    if name not in base:
        raise ValueError(f"unknown preset {name!r}")
    return SceneConfig(seed=seed, **{**base[name], **overrides})


@dataclass
class ToyFrame:
    obs: np.ndarray  # (n_agents, G, G)
    poses: np.ndarray  # (n_agents, 3): x, y in grid cells, yaw in radians
    gt: np.ndarray  # (G, G) in [0, 1]
    record: FrameRecord


@dataclass
class Stream:
    frames: list
    manifest: list
    config: SceneConfig

    def __len__(self):
        return len(self.frames)

    @property
    def obs(self) -> np.ndarray:
        return np.stack([f.obs for f in self.frames])

    @property
    def gt(self) -> np.ndarray:
        return np.stack([f.gt for f in self.frames])

    @property
    def poses(self) -> np.ndarray:
        return np.stack([f.poses for f in self.frames])

    def subset(self, indices) -> "Stream":
        idx = list(indices)
        return Stream([self.frames[i] for i in idx], [self.manifest[i] for i in idx], self.config)


class OccupancyField:
    """``sigmoid(3 * sum_k a_k cos(w_k . p + phi_k))`` with ``|w_k| = freq``."""

    def __init__(self, rng: np.random.Generator, freq: float, n_waves: int):
        theta = rng.uniform(0, 2 * np.pi, n_waves)
        self.k = freq * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        self.phase = rng.uniform(0, 2 * np.pi, n_waves)
        self.amp = rng.normal(0, 1, n_waves) * math.sqrt(2.0 / n_waves)

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        arg = xy @ self.k.T + self.phase
        g = np.cos(arg) @ self.amp
        return 1.0 / (1.0 + np.exp(-3.0 * g))


def _local_cells(g: int) -> np.ndarray:
    """Cell-centre offsets ``(u, v)`` of a ``g x g`` grid: u along columns, v along rows."""
    c = np.arange(g) - g / 2 + 0.5
    u, v = np.meshgrid(c, c)
    return np.stack([u, v], axis=-1)


def _rot(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def generate_stream(cfg: SceneConfig):
    """Return ``(stream, manifest)`` for ``cfg``; identical seeds give identical streams."""
    rng = np.random.default_rng(cfg.seed)
    world = OccupancyField(rng, cfg.field_freq, cfg.n_waves)
    G, A = cfg.grid, cfg.n_agents
    cells = _local_cells(G)
    vis = (cells ** 2).sum(-1) <= cfg.visibility_radius ** 2

    offsets = [np.zeros(2)]
    for j in range(1, A):
        ang = 2 * np.pi * j / max(A - 1, 1) + rng.uniform(-0.3, 0.3)
        offsets.append(cfg.formation_radius * np.array([math.cos(ang), math.sin(ang)]))
    yaw_offsets = np.concatenate([[0.0], rng.uniform(-np.pi, np.pi, A - 1)])

    pos = rng.uniform(-50, 50, 2)
    heading = rng.uniform(0, 2 * np.pi)
    frames, manifest = [], []
    for step in range(cfg.n_frames):
        heading += rng.normal(0, cfg.turn_std)
        pos = pos + cfg.speed * np.array([math.cos(heading), math.sin(heading)])
        ego_yaw = heading
        base_noise = rng.normal(0, cfg.noise_std, (A, G, G))
        for dup in range(cfg.duplication_factor):
            poses = np.empty((A, 3))
            obs = np.empty((A, G, G))
            for j in range(A):
                xy = pos + _rot(ego_yaw) @ offsets[j] + rng.normal(0, cfg.pose_jitter, 2)
                yaw = ego_yaw + yaw_offsets[j] + rng.normal(0, cfg.yaw_jitter)
                poses[j] = (xy[0], xy[1], yaw)
                world_xy = xy + cells @ _rot(yaw).T
                seen = world(world_xy.reshape(-1, 2)).reshape(G, G) * vis
                fresh = rng.normal(0, cfg.noise_std, (G, G))
                noise = math.sqrt(1 - cfg.dup_noise ** 2) * base_noise[j] + cfg.dup_noise * fresh
                obs[j] = cfg.obs_gain * seen + noise
            ego_cells = poses[0, :2] + cells @ _rot(poses[0, 2]).T
            gt = world(ego_cells.reshape(-1, 2)).reshape(G, G)
            k = len(frames)
            t_us = step * cfg.step_us + dup * cfg.dup_us
            rec = FrameRecord(
                f"s{cfg.seed}-{k:05d}", int(t_us),
                (float(poses[0, 0] * cfg.cell_m), float(poses[0, 1] * cfg.cell_m), 0.0),
            )
            frames.append(ToyFrame(obs, poses, gt, rec))
            manifest.append(rec)
    stream = Stream(frames, manifest, cfg)
    return stream, manifest


def relative_poses(poses: np.ndarray) -> np.ndarray:
    """Each agent's pose in the ego (agent 0) frame: ``(..., A, 3)`` -> same shape."""
    ego = poses[..., :1, :]
    d = poses[..., :2] - ego[..., :2]
    c, s = np.cos(ego[..., 2]), np.sin(ego[..., 2])
    dx = c * d[..., 0] + s * d[..., 1]
    dy = -s * d[..., 0] + c * d[..., 1]
    return np.stack([dx, dy, poses[..., 2] - ego[..., 2]], axis=-1)


def warp_indices(rel_pose: np.ndarray, g: int):
    """Source-cell index maps for :func:`warp_to_ego`, shape ``(N, g, g)``."""
    rel = np.atleast_2d(np.asarray(rel_pose, dtype=np.float64))
    cells = _local_cells(g)
    q = cells[None] - rel[:, None, None, :2]
    c, s = np.cos(rel[:, 2])[:, None, None], np.sin(rel[:, 2])[:, None, None]
    # rotate by -yaw into the sender's frame
    u = c * q[..., 0] + s * q[..., 1]
    v = -s * q[..., 0] + c * q[..., 1]
    cols = np.floor(u + g / 2).astype(np.int64)
    rows = np.floor(v + g / 2).astype(np.int64)
    valid = (rows >= 0) & (rows < g) & (cols >= 0) & (cols < g)
    return rows, cols, valid


def warp_to_ego(feat, rel_pose) -> T.Tensor:
    """Rigid 2-D transform of ``feat`` into the ego grid, nearest-neighbour.

    ``rel_pose`` is ``(dx, dy, dyaw)`` in grid cells of ``feat`` (one row per
    batch sample, or a single row shared by all). Cells that land outside the
    source grid are zero.
    """
    feat = T.as_tensor(feat)
    N, _, H, W = feat.shape
    if H != W:
        raise ShapeError("warp_to_ego expects square grids")
    rel = np.atleast_2d(np.asarray(rel_pose, dtype=np.float64))
    if not np.all(np.isfinite(rel)):
        raise ValueError("relative pose must be finite")
    if rel.shape[0] == 1 and N > 1:
        rel = np.repeat(rel, N, axis=0)
    rows, cols, valid = warp_indices(rel, H)
    return T.gather2d(feat, rows, cols, valid)


def fuse(warped, n_agents: int, prompt=None, weight=None) -> T.Tensor:
    """Mean over agents plus ``weight * prompt``.

    ``warped`` holds ``B * n_agents`` ego-aligned feature maps (frame-major);
    ``prompt`` is ``(B, C, H, W)`` at the same resolution, ``weight`` a scalar.
    """
    warped = T.as_tensor(warped)
    if warped.shape[0] == 0 or n_agents < 1:
        raise ValueError("fusion needs at least one agent")
    fused = T.group_mean(warped, n_agents)
    if prompt is not None and weight is not None:
        fused = T.scale_add(fused, weight, prompt)
    return fused


class ConvBlock(T.Module):
    def __init__(self, c_in, c_out, rng, name, ksize=3):
        super().__init__()
        self.conv = T.Conv2d(c_in, c_out, ksize, rng, name=name + ".conv")
        self.norm = T.BatchNorm(c_out, name=name + ".bn")

    def __call__(self, x):
        return T.relu(self.norm(self.conv(x)))


class ToyPipeline(T.Module):
    """Frozen backbone with optional adaptation modules.

    Without ``ktpro`` the forward pass is the plain collaborative model used
    for source-domain pretraining.
    """

    def __init__(self, grid: int = 16, n_agents: int = 3, c_early: int = 8, c_mid: int = 8,
                 hidden: int = 512, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "n_agents", n_agents)
        object.__setattr__(self, "dims", (c_early, c_mid, hidden))
        self.enc1 = ConvBlock(1, 32, rng, "enc1")
        self.enc2 = ConvBlock(32, c_early, rng, "enc2")
        self.ms1 = ConvBlock(c_early, hidden, rng, "ms1", ksize=1)
        self.ms2 = ConvBlock(hidden, c_mid, rng, "ms2")
        self.head = T.Conv2d(c_mid, 1, 1, rng, bias=True, name="head")
        object.__setattr__(self, "ktpro", None)
        object.__setattr__(self, "prompt_weight", None)
        object.__setattr__(self, "memory", FeatureMemory())

    def backbone_modules(self):
        return [self.enc1, self.enc2, self.ms1, self.ms2, self.head]

    def attach_adapters(self, seed: int, cfg: StageConfig = StageConfig()) -> None:
        """Install fresh adaptation modules (replacing any existing ones)."""
        c_early, c_mid, _ = self.dims
        self._modules.pop("ktpro", None)
        self._params.pop("prompt_weight", None)
        self.ktpro = KTPro(c_early, c_mid, cfg, seed=seed)
        self.prompt_weight = T.Param(np.array(0.0), name="fusion.prompt_weight")

    def freeze_backbone(self) -> None:
        for mod in self.backbone_modules():
            mod.freeze()
            for sub in mod.modules():
                if isinstance(sub, T.BatchNorm):
                    sub.freeze_stats()

    def frozen_parameters(self):
        return [p for p in self.parameters() if not p.trainable]

    def trainable_fraction(self) -> float:
        return self.num_params(trainable=True) / self.num_params()

    def forward(self, obs: np.ndarray, poses: np.ndarray) -> T.Tensor:
        """``obs`` ``(B, A, G, G)`` and absolute ``poses`` ``(B, A, 3)`` -> ``(B, 1, G, G)``."""
        B, A, G, _ = obs.shape
        if A != self.n_agents or G != self.grid:
            raise ShapeError(f"expected (B, {self.n_agents}, {self.grid}, {self.grid}) observations")
        rel = relative_poses(poses).reshape(B * A, 3)
        rel_mid = rel * np.array([0.5, 0.5, 1.0])
        x = T.Tensor(obs.reshape(B * A, 1, G, G))
        f_e = self.enc2(self.enc1(x))
        adapted = self.ktpro is not None
        prompt = None
        if adapted:
            self.memory.clear()
            agents = np.tile(np.arange(A), B)
            f_e, prompt = adapt_stage("early", f_e, self.memory, self.ktpro, agents=agents, group_size=A)
        f_m = self.ms2(self.ms1(T.avgpool2(f_e)))
        if adapted:
            f_m = adapt_stage("middle", f_m, self.memory, self.ktpro)
        warped = warp_to_ego(f_m, rel_mid)
        if adapted:
            # one group per frame: every agent carries the group prompt, warped like its features
            per_agent = T.select_rows(prompt, np.repeat(np.arange(B), A))
            prompt = T.avgpool2(fuse(warp_to_ego(per_agent, rel), A))
        h = fuse(warped, A, prompt, self.prompt_weight)
        if adapted:
            h = adapt_stage("late", h, self.memory, self.ktpro, rows=np.arange(B) * A)
        out = T.upsample_nearest(T.sigmoid(self.head(h)), G, G)
        if adapted:
            self.memory.clear()
        return out

    __call__ = forward


def _batches(n: int, batch: int, steps: int, seed: int):
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        yield rng.choice(n, size=min(batch, n), replace=False)


def train_steps(pipe: ToyPipeline, stream: Stream, indices: Sequence[int], steps: int, batch: int,
                lr: float, seed: int, momentum: float = 0.9, params=None) -> list:
    """Run ``steps`` SGD steps on frames ``indices``; returns per-step batch MSE."""
    params = pipe.trainable_parameters() if params is None else params
    opt = T.SGD(params, lr=lr, momentum=momentum)
    obs, poses, gt = stream.obs[list(indices)], stream.poses[list(indices)], stream.gt[list(indices)]
    pipe.set_mode("train")
    losses = []
    for pick in _batches(len(indices), batch, steps, seed):
        opt.zero_grad()
        pred = pipe(obs[pick], poses[pick])
        loss = T.mse_loss(pred, gt[pick][:, None])
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


def evaluate(pipe: ToyPipeline, stream: Stream, chunk: int = 8) -> float:
    pipe.set_mode("eval")
    obs, poses, gt = stream.obs, stream.poses, stream.gt
    total = 0.0
    for s in range(0, len(stream), chunk):
        pred = pipe(obs[s:s + chunk], poses[s:s + chunk]).data[:, 0]
        total += float(((pred - gt[s:s + chunk]) ** 2).sum())
    pipe.set_mode("train")
    return total / gt.size


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 300
    batch: int = 4
    lr: float = 0.05
    seed: int = 0
    hidden: int = 512

    def to_json(self) -> dict:
        return asdict(self)


def pretrain_frozen(cfg: PretrainConfig = PretrainConfig(), scene: Optional[SceneConfig] = None,
                    adapter_seed: int = 0, return_curve: bool = False):
    """Train the plain pipeline on the source domain, then freeze it and add adapters."""
    scene = scene or preset("source", seed=cfg.seed)
    stream, _ = generate_stream(scene)
    pipe = ToyPipeline(scene.grid, scene.n_agents, hidden=cfg.hidden, seed=cfg.seed)
    init_loss = evaluate(pipe, stream)
    curve = train_steps(pipe, stream, range(len(stream)), cfg.steps, cfg.batch, cfg.lr, seed=cfg.seed)
    final_loss = evaluate(pipe, stream)
    pipe.freeze_backbone()
    pipe.attach_adapters(adapter_seed)
    if return_curve:
        return pipe, {"init_loss": init_loss, "final_loss": final_loss, "train_curve": curve}
    return pipe


def select_indices(stream: Stream, strategy: str, alpha: float, seed: int, weights=DEFAULT_WEIGHTS):
    """Pick ``floor(alpha * n)`` frames; returns ``(indices, coverage_radius)``."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    n = len(stream)
    m = budget_from_ratio(n, alpha)
    D = distance_matrix(extract_features(stream.manifest), weights)
    if strategy == "wgs":
        idx = wgs_select(D, m).indices
    elif strategy == "random":
        idx = random_select(n, m, seed)
    else:
        idx = uniform_select(n, m)
    return tuple(idx), coverage_radius(D, idx)


@dataclass(frozen=True)
class AdaptConfig:
    steps: int = 60
    batch: int = 4
    lr: float = 0.05
    eval_every: int = 0  # 0: evaluate only before and after training

    def to_json(self) -> dict:
        return asdict(self)


def toy_adapt(pipe: ToyPipeline, stream: Stream, strategy: str, alpha: float, seed: int,
              eval_stream: Stream, cfg: AdaptConfig = AdaptConfig()) -> list:
    """Adapt a copy of ``pipe`` on a selected subset of ``stream``.

    The copy gets adapters initialized from ``seed`` and batches drawn with
    ``seed``, so strategies sharing a seed differ only in the selected set.
    Returns MetricsTable rows (dicts keyed by ``METRIC_COLUMNS``).
    """
    if not (isinstance(alpha, (int, float)) and 0 < alpha <= 1):
        raise InvalidRatio(f"ratio must lie in (0, 1], got {alpha!r}")
    idx, radius = select_indices(stream, strategy, alpha, seed)
    work = copy.deepcopy(pipe)
    work.attach_adapters(seed)
    frozen = work.frozen_parameters()
    before = T.checksum(frozen)
    frac = work.trainable_fraction()

    def row(step, train=None, ev=None):
        return {"strategy": strategy, "alpha": alpha, "seed": seed, "step": step, "train_mse": train,
                "eval_mse": ev, "coverage_radius": radius, "trainable_fraction": frac}

    rows = [row(0, ev=evaluate(work, eval_stream))]
    done = 0
    chunk = cfg.eval_every or cfg.steps
    while done < cfg.steps:
        n = min(chunk, cfg.steps - done)
        losses = train_steps(work, stream, idx, n, cfg.batch, cfg.lr, seed=seed * 1_000_003 + done)
        for i, l in enumerate(losses):
            rows.append(row(done + i + 1, train=l))
        done += n
        rows[-1]["eval_mse"] = evaluate(work, eval_stream)
    if T.checksum(frozen) != before:
        raise AssertionError("frozen parameters changed during adaptation")
    return rows


def final_eval(rows) -> float:
    return [r for r in rows if r["eval_mse"] is not None][-1]["eval_mse"]


def experiment_streams(preset_name: str, seed: int):
    """Target stream and held-out eval stream for one experiment seed."""
    stream, _ = generate_stream(preset(preset_name, seed=seed))
    eval_stream, _ = generate_stream(preset("eval", seed=10_000 + seed))
    return stream, eval_stream


def compare_strategies(pipe: ToyPipeline, strategies, alpha: float, seeds, preset_name: str = "redundancy",
                       cfg: AdaptConfig = AdaptConfig()) -> list:
    rows = []
    for seed in seeds:
        stream, eval_stream = experiment_streams(preset_name, seed)
        for strategy in strategies:
            rows.extend(toy_adapt(pipe, stream, strategy, alpha, seed, eval_stream, cfg))
    return rows


def sweep(pipe: ToyPipeline, ratios, strategy: str, seeds, preset_name: str = "redundancy",
          cfg: AdaptConfig = AdaptConfig(), plateau_tol: float = 0.05) -> list:
    """Coverage radius and final eval MSE per ratio, plus the plateau ratio.

    The plateau ratio of a seed is the smallest ratio whose eval MSE is within
    ``plateau_tol`` (relative) of the largest ratio's eval MSE.
    """
    ratios = sorted(ratios)
    out = []
    for seed in seeds:
        stream, eval_stream = experiment_streams(preset_name, seed)
        block = []
        for r in ratios:
            rows = toy_adapt(pipe, stream, strategy, r, seed, eval_stream, cfg)
            block.append({"seed": seed, "strategy": strategy, "ratio": r,
                          "coverage_radius": rows[0]["coverage_radius"], "eval_mse": final_eval(rows)})
        full = block[-1]["eval_mse"]
        plateau = next(b["ratio"] for b in block if b["eval_mse"] <= full * (1 + plateau_tol))
        for b in block:
            b["plateau_ratio"] = plateau
        out.extend(block)
    return out
