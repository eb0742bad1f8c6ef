"""Progressive knowledge transfer blocks.

Early-stage features are refined by a stack of dual-path adapters, written
to a gradient-isolated memory, compressed, and injected into later stages
through a bounded multiplicative gate ``F * (1 + alpha * A)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import InvalidGrouping, ShapeError, StageOrderError

STAGES = ("early", "middle", "late")


@dataclass(frozen=True)
class StageConfig:
    n_early: int = 3
    n_middle: int = 1
    n_late: int = 1
    r_early: int = 2
    r_middle: int = 4
    r_late: int = 8

    def __post_init__(self):
        if (self.n_early, self.n_middle, self.n_late) != (3, 1, 1):
            raise ValueError("block counts are fixed at N_early=3, N_middle=N_late=1")
        if not (1 <= self.r_early < self.r_middle < self.r_late):
            raise ValueError("compression ratios must satisfy 1 <= r_early < r_middle < r_late")

    def ratio(self, stage: str) -> int:
        return {"early": self.r_early, "middle": self.r_middle, "late": self.r_late}[stage]

    def to_json(self) -> dict:
        return asdict(self)


class GatingCoefficient(T.Module):
    """Learnable gate ``alpha = 0.1 + 0.4 * sigmoid(raw)``, in (0.1, 0.5)."""

    def __init__(self, raw: float = 0.0, name: str = "gate"):
        super().__init__()
        self.raw = T.Param(np.array(float(raw)), name=name + ".raw")
        # test hook: when set, alpha is exactly this constant
        object.__setattr__(self, "override", None)

    def alpha(self) -> T.Tensor:
        if self.override is not None:
            return T.Tensor(np.array(float(self.override)))
        return T.affine(T.sigmoid(self.raw), 0.4, 0.1)

    def set_override(self, value: Optional[float]) -> None:
        object.__setattr__(self, "override", value)


class CompressorBlock(T.Module):
    """``relu(bn(conv3x3(avgpool2(F))))`` with ``ceil(C / r)`` output channels."""

    def __init__(self, c_in: int, r: int, rng: np.random.Generator, name: str = "compress"):
        super().__init__()
        if r < 1:
            raise ValueError("compression ratio must be >= 1")
        self.c_in = c_in
        self.c_out = math.ceil(c_in / r)
        self.conv = T.Conv2d(c_in, self.c_out, 3, rng, name=name + ".conv")
        self.norm = T.BatchNorm(self.c_out, name=name + ".bn")

    def __call__(self, x):
        return compress(x, self)


def compress(f_early, block: CompressorBlock) -> T.Tensor:
    if f_early.shape[1] != block.c_in:
        raise ShapeError(f"compressor expects {block.c_in} channels, got {f_early.shape[1]}")
    if min(f_early.shape[2:]) < 2:
        raise ShapeError(f"compressor needs spatial dims >= 2, got {f_early.shape[2:]}")
    return T.relu(block.norm(block.conv(T.avgpool2(f_early))))


class InjectorBlock(T.Module):
    """Attention map ``sigmoid(conv2(relu(bn(conv1(K)))))`` at the target's shape."""

    def __init__(self, c_knowledge: int, c_target: int, rng: np.random.Generator, name: str = "inject"):
        super().__init__()
        self.c_knowledge = c_knowledge
        self.c_target = c_target
        self.conv1 = T.Conv2d(c_knowledge, c_knowledge, 3, rng, name=name + ".conv1")
        self.norm = T.BatchNorm(c_knowledge, name=name + ".bn")
        self.conv2 = T.Conv2d(c_knowledge, c_target, 3, rng, name=name + ".conv2")

    def attention(self, k_c, size) -> T.Tensor:
        if k_c.shape[2:] != tuple(size):
            k_c = T.upsample_nearest(k_c, *size)
        return T.sigmoid(self.conv2(T.relu(self.norm(self.conv1(k_c)))))


def inject(f_later, k_c, injector: InjectorBlock, gate: GatingCoefficient) -> T.Tensor:
    """Return ``F_later * (1 + alpha * A)``."""
    if f_later.shape[1] != injector.c_target:
        raise ShapeError(f"injector produces {injector.c_target} channels, features have {f_later.shape[1]}")
    if k_c.shape[0] != f_later.shape[0]:
        raise ShapeError("knowledge and features have different batch sizes")
    attn = injector.attention(k_c, f_later.shape[2:])
    one_plus = T.affine(T.mul(attn, gate.alpha()), 1.0, 1.0)
    return T.mul(f_later, one_plus)


class DualPathAdapter(T.Module):
    """Residual adapter ``F + w_s * spatial(F) + w_c * channel(F)``.

    spatial: depthwise 3x3, batch norm, relu, per-channel 1x1 scale
    channel: 1x1 down to ``ceil(C / r)``, relu, 1x1 up
    The last conv of each path starts at zero, so a fresh adapter is the identity.
    """

    def __init__(self, channels: int, r: int, rng: np.random.Generator, name: str = "adapter"):
        super().__init__()
        self.channels = channels
        hidden = math.ceil(channels / r)
        self.dw = T.Conv2d(channels, channels, 3, rng, groups=channels, name=name + ".dw")
        self.norm = T.BatchNorm(channels, name=name + ".bn")
        self.dw_out = T.Conv2d(channels, channels, 1, rng, groups=channels, zero_init=True, name=name + ".dw_out")
        self.down = T.Conv2d(channels, hidden, 1, rng, name=name + ".down")
        self.up = T.Conv2d(hidden, channels, 1, rng, zero_init=True, name=name + ".up")
        self.logits = T.Param(np.zeros(2), name=name + ".logits")

    def weights(self):
        """``(w_s, w_c)`` as scalar tensors.

        The smaller weight comes straight from the softmax (so it stays
        positive) and the larger one is ``1 - smaller``, which makes the pair
        sum to one exactly in floating point.
        """
        s = T.softmax(self.logits)
        if s.data[0] <= s.data[1]:
            w_s = T.index(s, 0)
            return w_s, T.affine(w_s, -1.0, 1.0)
        w_c = T.index(s, 1)
        return T.affine(w_c, -1.0, 1.0), w_c

    def fusion_weights(self) -> np.ndarray:
        return np.array([w.item() for w in self.weights()])

    def spatial(self, f):
        return self.dw_out(T.relu(self.norm(self.dw(f))))

    def channel(self, f):
        return self.up(T.relu(self.down(f)))

    def __call__(self, f):
        return dual_path(f, self)


def dual_path(f, adapter: DualPathAdapter) -> T.Tensor:
    if f.shape[1] != adapter.channels:
        raise ShapeError(f"adapter expects {adapter.channels} channels, got {f.shape[1]}")
    w_s, w_c = adapter.weights()
    mixed = T.scale_add(T.mul(adapter.spatial(f), w_s), w_c, adapter.channel(f))
    return T.add(f, mixed)


class AgentPromptGenerator(T.Module):
    """1x1 projection of the mean early feature of each agent group."""

    def __init__(self, c_in: int, c_prompt: int, rng: np.random.Generator, name: str = "prompt"):
        super().__init__()
        self.c_in = c_in
        self.c_prompt = c_prompt
        self.proj = T.Conv2d(c_in, c_prompt, 1, rng, name=name + ".proj")

    def __call__(self, mean_feat):
        return self.proj(mean_feat)


def make_prompts(early_feats: Mapping, groups: Mapping, gen: AgentPromptGenerator) -> dict:
    """Map each group id to ``proj(mean of its members' early features)``.

    ``early_feats`` maps agent -> tensor; ``groups`` maps agent -> group id.
    Members are summed in sorted agent order so the result does not depend
    on how the grouping was listed.
    """
    missing = set(early_feats) - set(groups)
    if missing:
        raise InvalidGrouping(f"agents without a group: {sorted(missing)}")
    members: dict = {}
    for agent in sorted(groups):
        if agent not in early_feats:
            raise InvalidGrouping(f"group member {agent!r} has no features")
        members.setdefault(groups[agent], []).append(agent)
    shapes = {early_feats[a].shape for a in early_feats}
    if len(shapes) > 1:
        raise ShapeError(f"agent features differ in shape: {shapes}")
    prompts = {}
    for gid, agents in members.items():
        if not agents:
            raise InvalidGrouping(f"group {gid!r} is empty")
        acc = T.as_tensor(early_feats[agents[0]])
        for a in agents[1:]:
            acc = T.add(acc, early_feats[a])
        prompts[gid] = gen(T.affine(acc, 1.0 / len(agents), 0.0) if len(agents) > 1 else acc)
    return prompts


class FeatureMemory:
    """Detached cache of adapted early features, read by later stages.

    Rows follow the batch layout of the early stage; ``agents`` labels each
    row so later stages can read a single agent's entries.
    """

    def __init__(self):
        self.clear()

    def clear(self):
        self._value: Optional[T.Tensor] = None
        self._agents: Optional[np.ndarray] = None
        self.compressed: Optional[T.Tensor] = None

    @property
    def empty(self) -> bool:
        return self._value is None

    def write(self, f_adapted, agents: Optional[Sequence] = None) -> None:
        if self._value is not None:
            raise StageOrderError("memory already written in this forward pass")
        self._value = T.detach(f_adapted)
        n = f_adapted.shape[0]
        self._agents = np.asarray(agents) if agents is not None else np.zeros(n, dtype=int)

    def read(self) -> T.Tensor:
        if self._value is None:
            raise StageOrderError("early stage must run before middle/late stages")
        return self._value

    def rows_for(self, agent) -> np.ndarray:
        if self._agents is None:
            raise StageOrderError("early stage must run before middle/late stages")
        return np.flatnonzero(self._agents == agent)


class EarlyStage(T.Module):
    def __init__(self, channels, cfg: StageConfig, rng, c_prompt=None):
        super().__init__()
        for i in range(cfg.n_early):
            self.add_module(f"block{i}", DualPathAdapter(channels, cfg.r_early, rng, name=f"early.block{i}"))
        object.__setattr__(self, "n_blocks", cfg.n_early)
        self.compressor = CompressorBlock(channels, cfg.r_early, rng, name="early.compress")
        self.prompt = AgentPromptGenerator(channels, c_prompt or channels, rng, name="early.prompt")

    def blocks(self):
        return [getattr(self, f"block{i}") for i in range(self.n_blocks)]


class LaterStage(T.Module):
    def __init__(self, stage, channels, c_knowledge, cfg: StageConfig, rng):
        super().__init__()
        r = cfg.ratio(stage)
        self.block = DualPathAdapter(channels, r, rng, name=f"{stage}.block0")
        self.injector = InjectorBlock(c_knowledge, channels, rng, name=f"{stage}.inject")
        self.gate = GatingCoefficient(name=f"{stage}.gate")


class KTPro(T.Module):
    """All trainable adaptation modules for one pipeline."""

    def __init__(self, c_early: int, c_mid: int, cfg: StageConfig = StageConfig(), seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        object.__setattr__(self, "cfg", cfg)
        self.early = EarlyStage(c_early, cfg, rng, c_prompt=c_mid)
        k = self.early.compressor.c_out
        self.middle = LaterStage("middle", c_mid, k, cfg, rng)
        self.late = LaterStage("late", c_mid, k, cfg, rng)

    def stage_param_counts(self) -> dict:
        return {s: getattr(self, s).num_params() for s in STAGES}

    def knowledge(self, memory: FeatureMemory) -> T.Tensor:
        """Compressed memory, computed once per forward pass."""
        if memory.compressed is None:
            memory.compressed = self.early.compressor(memory.read())
        return memory.compressed

    def set_injection(self, enabled: bool) -> None:
        """Test hook: disabled injection forces alpha = 0 at middle and late."""
        for s in ("middle", "late"):
            getattr(self, s).gate.set_override(None if enabled else 0.0)


def adapt_stage(stage: str, f, memory: FeatureMemory, ktpro: KTPro, agents=None,
                group_size: Optional[int] = None, rows=None):
    """Run one stage of the adaptation.

    early:  three dual-path blocks; the result is written (detached) to
            ``memory``. Returns ``(F_hat, prompts)`` where prompts are the
            per-frame group prompts when ``group_size`` is given, else None.
    middle/late: one dual-path block, then injection of the compressed
            memory. ``rows`` selects which memory rows align with ``f``.
    """
    if stage == "early":
        for block in ktpro.early.blocks():
            f = block(f)
        memory.write(f, agents)
        prompts = None
        if group_size is not None:
            prompts = ktpro.early.prompt(T.group_mean(f, group_size))
        return f, prompts
    if stage not in ("middle", "late"):
        raise ValueError(f"unknown stage {stage!r}")
    if memory.empty:
        raise StageOrderError(f"{stage} stage ran before the early stage populated memory")
    mod = getattr(ktpro, stage)
    k_c = ktpro.knowledge(memory)
    if rows is not None:
        k_c = T.select_rows(k_c, rows)
    return inject(mod.block(f), k_c, mod.injector, mod.gate)
