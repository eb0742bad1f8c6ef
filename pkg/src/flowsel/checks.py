"""Named gradient checks for every op and composite block.

Each entry builds a small random graph from a seed and returns the maximum
relative error reported by :func:`flowsel.tensor.grad_check`. The CLI
``gradcheck`` command and the acceptance suite both run this registry.
"""

from __future__ import annotations

import time
from typing import Callable, Dict, Iterable, Optional

import numpy as np

from . import tensor as T
from .adapt import (
    AgentPromptGenerator,
    CompressorBlock,
    DualPathAdapter,
    FeatureMemory,
    GatingCoefficient,
    InjectorBlock,
    KTPro,
    adapt_stage,
    compress,
    dual_path,
    inject,
    make_prompts,
)

GRAD_TOL = 1e-4
CheckFn = Callable[[int], float]
REGISTRY: Dict[str, CheckFn] = {}


def register(name: str, registry: Optional[dict] = None):
    target = REGISTRY if registry is None else registry

    def deco(fn: CheckFn) -> CheckFn:
        target[name] = fn
        return fn

    return deco


def _p(rng, shape, scale=1.0):
    return T.Param(rng.normal(0, scale, size=shape))


def _randomize(module, rng, scale=0.4):
    for p in module.parameters():
        p.data[...] = rng.normal(0, scale, size=p.data.shape)


def _check(fn, params, seed):
    return T.grad_check(fn, params, seed=seed)


@register("conv2d")
def _conv(seed):
    rng = np.random.default_rng(seed)
    x, k, b = _p(rng, (2, 3, 6, 5)), _p(rng, (4, 3, 3, 3)), _p(rng, (4,))
    t = rng.normal(size=(2, 4, 6, 5))
    return _check(lambda: T.mse_loss(T.conv2d(x, k, bias=b), t), [x, k, b], seed)


@register("conv2d_1x1")
def _conv1(seed):
    rng = np.random.default_rng(seed)
    x, k = _p(rng, (2, 5, 4, 4)), _p(rng, (3, 5, 1, 1))
    t = rng.normal(size=(2, 3, 4, 4))
    return _check(lambda: T.mse_loss(T.conv2d(x, k), t), [x, k], seed)


@register("conv2d_depthwise")
def _dw(seed):
    rng = np.random.default_rng(seed)
    x, k = _p(rng, (2, 4, 5, 5)), _p(rng, (4, 1, 3, 3))
    t = rng.normal(size=(2, 4, 5, 5))
    return _check(lambda: T.mse_loss(T.conv2d(x, k, groups=4), t), [x, k], seed)


@register("batchnorm")
def _bn(seed):
    rng = np.random.default_rng(seed)
    x, sc, sh = _p(rng, (2, 3, 4, 4)), T.Param(rng.uniform(0.5, 1.5, 3)), _p(rng, (3,))
    t = rng.normal(size=(2, 3, 4, 4))
    return _check(lambda: T.mse_loss(T.batchnorm(x, sc, sh), t), [x, sc, sh], seed)


@register("batchnorm_frozen")
def _bnf(seed):
    rng = np.random.default_rng(seed)
    x, sc, sh = _p(rng, (2, 3, 4, 4)), T.Param(rng.uniform(0.5, 1.5, 3)), _p(rng, (3,))
    running = {"mean": rng.normal(size=3), "var": rng.uniform(0.5, 2.0, 3)}
    t = rng.normal(size=(2, 3, 4, 4))
    fn = lambda: T.mse_loss(T.batchnorm(x, sc, sh, mode="frozen", running=running), t)  # noqa: E731
    return _check(fn, [x, sc, sh], seed)


@register("avgpool2")
def _pool(seed):
    rng = np.random.default_rng(seed)
    x = _p(rng, (2, 3, 5, 6))
    t = rng.normal(size=(2, 3, 2, 3))
    return _check(lambda: T.mse_loss(T.avgpool2(x), t), [x], seed)


@register("upsample_nearest")
def _up(seed):
    rng = np.random.default_rng(seed)
    x = _p(rng, (2, 2, 3, 3))
    t = rng.normal(size=(2, 2, 7, 5))
    return _check(lambda: T.mse_loss(T.upsample_nearest(x, 7, 5), t), [x], seed)


@register("relu")
def _relu(seed):
    rng = np.random.default_rng(seed)
    x = _p(rng, (2, 3, 4, 4))
    t = rng.normal(size=(2, 3, 4, 4))
    return _check(lambda: T.mse_loss(T.relu(x), t), [x], seed)


@register("elementwise")
def _elem(seed):
    # sigmoid, add, mul (tensor and scalar), scale_add, affine
    rng = np.random.default_rng(seed)
    x, y, a = _p(rng, (2, 3, 4, 4)), _p(rng, (2, 3, 4, 4)), _p(rng, ())
    t = rng.normal(size=(2, 3, 4, 4))

    def fn():
        h = T.add(T.sigmoid(x), T.mul(x, y))
        h = T.affine(T.mul(h, a), 0.7, -0.2)
        return T.mse_loss(T.scale_add(h, a, y), t)

    return _check(fn, [x, y, a], seed)


@register("softmax")
def _softmax(seed):
    rng = np.random.default_rng(seed)
    logits, x = _p(rng, (2,)), _p(rng, (1, 2, 3, 3))
    t = rng.normal(size=(1, 2, 3, 3))

    def fn():
        w = T.softmax(logits)
        return T.mse_loss(T.scale_add(T.mul(x, T.index(w, 0)), T.index(w, 1), T.sigmoid(x)), t)

    return _check(fn, [logits, x], seed)


@register("gather_select_group_mean")
def _gather(seed):
    rng = np.random.default_rng(seed)
    x = _p(rng, (4, 2, 5, 5))
    rows, cols = rng.integers(0, 5, (4, 5, 5)), rng.integers(0, 5, (4, 5, 5))
    valid = rng.random((4, 5, 5)) > 0.3
    t = rng.normal(size=(2, 2, 5, 5))

    def fn():
        g = T.select_rows(T.gather2d(x, rows, cols, valid), [0, 1, 1, 3])
        return T.mse_loss(T.group_mean(g, 2), t)

    return _check(fn, [x], seed)


@register("mse_loss")
def _mse(seed):
    rng = np.random.default_rng(seed)
    x = _p(rng, (2, 1, 3, 3))
    t = rng.normal(size=(2, 1, 3, 3))
    return _check(lambda: T.mse_loss(x, t), [x], seed)


@register("compressor")
def _compressor(seed):
    rng = np.random.default_rng(seed)
    block = CompressorBlock(6, 2, rng)
    _randomize(block, rng)
    x = _p(rng, (2, 6, 6, 6))
    t = rng.normal(size=(2, 3, 3, 3))
    return _check(lambda: T.mse_loss(compress(x, block), t), [x] + block.parameters(), seed)


@register("injector")
def _injector(seed):
    rng = np.random.default_rng(seed)
    inj, gate = InjectorBlock(3, 5, rng), GatingCoefficient(raw=0.5)
    _randomize(inj, rng)
    f, k = _p(rng, (2, 5, 6, 6)), _p(rng, (2, 3, 3, 3))
    t = rng.normal(size=(2, 5, 6, 6))
    params = [f, k, gate.raw] + inj.parameters()
    return _check(lambda: T.mse_loss(inject(f, k, inj, gate), t), params, seed)


@register("dual_path")
def _dual(seed):
    rng = np.random.default_rng(seed)
    ad = DualPathAdapter(4, 2, rng)
    _randomize(ad, rng)
    x = _p(rng, (2, 4, 5, 5))
    t = rng.normal(size=(2, 4, 5, 5))
    return _check(lambda: T.mse_loss(dual_path(x, ad), t), [x] + ad.parameters(), seed)


@register("prompts")
def _prompts(seed):
    rng = np.random.default_rng(seed)
    gen = AgentPromptGenerator(3, 4, rng)
    feats = {a: _p(rng, (1, 3, 4, 4)) for a in range(3)}
    t = rng.normal(size=(1, 4, 4, 4))
    fn = lambda: T.mse_loss(make_prompts(feats, {0: 0, 1: 0, 2: 0}, gen)[0], t)  # noqa: E731
    return _check(fn, list(feats.values()) + gen.parameters(), seed)


@register("fusion")
def _fusion(seed):
    from .scenegen import fuse, warp_to_ego

    rng = np.random.default_rng(seed)
    x, p, w = _p(rng, (6, 3, 6, 6)), _p(rng, (2, 3, 6, 6)), T.Param(np.array(0.4))
    rel = rng.normal(0, 1.5, size=(6, 3))
    t = rng.normal(size=(2, 3, 6, 6))
    return _check(lambda: T.mse_loss(fuse(warp_to_ego(x, rel), 3, p, w), t), [x, p, w], seed)


def _downstream_of_memory(kt: KTPro) -> list:
    """Trainables whose every path to the loss is differentiable.

    The early adapter blocks also reach the loss through the detached
    memory, where finite differences see an effect that backpropagation
    deliberately drops, so they are checked separately with injection off.
    """
    early_blocks = {id(p) for b in kt.early.blocks() for p in b.parameters()}
    return [p for p in kt.parameters() if id(p) not in early_blocks]


def _early_blocks(kt: KTPro) -> list:
    return [p for b in kt.early.blocks() for p in b.parameters()]


@register("ktpro_stages")
def _stages(seed):
    rng = np.random.default_rng(seed)
    kt = KTPro(4, 4, seed=seed)
    _randomize(kt, rng)
    f_e, f_m = _p(rng, (2, 4, 8, 8)), T.Tensor(rng.normal(size=(2, 4, 4, 4)))
    t = rng.normal(size=(2, 4, 4, 4))

    def fn():
        mem = FeatureMemory()
        f_hat, _ = adapt_stage("early", f_e, mem, kt)
        # the early output also feeds the middle stage directly, as in the pipeline
        h = adapt_stage("middle", T.add(f_m, T.avgpool2(f_hat)), mem, kt)
        return T.mse_loss(adapt_stage("late", h, mem, kt), t)

    err = _check(fn, _downstream_of_memory(kt), seed)
    kt.set_injection(False)
    try:
        err_early = _check(fn, _early_blocks(kt) + [f_e], seed)
    finally:
        kt.set_injection(True)
    return max(err, err_early)


@register("toy_pipeline")
def _pipeline(seed):
    from .scenegen import SceneConfig, ToyPipeline, generate_stream

    rng = np.random.default_rng(seed)
    stream, _ = generate_stream(SceneConfig(grid=8, n_frames=2, seed=seed))
    pipe = ToyPipeline(grid=8, hidden=16, seed=seed)
    pipe.freeze_backbone()
    pipe.attach_adapters(seed)
    for p in pipe.trainable_parameters():
        p.data[...] = rng.normal(0, 0.3, size=p.data.shape)
    obs, poses, gt = stream.obs, stream.poses, stream.gt[:, None]
    fn = lambda: T.mse_loss(pipe(obs, poses), gt)  # noqa: E731
    kt = pipe.ktpro
    err = _check(fn, _downstream_of_memory(kt) + [pipe.prompt_weight], seed)
    kt.set_injection(False)
    try:
        err_early = _check(fn, _early_blocks(kt), seed)
    finally:
        kt.set_injection(True)
    return max(err, err_early)


def run_checks(names: Optional[Iterable[str]] = None, seed: int = 0, registry: Optional[dict] = None,
               tol: float = GRAD_TOL) -> list:
    """Run the named checks (all by default); one result dict per check."""
    registry = REGISTRY if registry is None else registry
    names = list(registry) if names is None else list(names)
    unknown = [n for n in names if n not in registry]
    if unknown:
        raise KeyError(f"unknown gradient checks: {unknown}; known: {sorted(registry)}")
    out = []
    for name in names:
        t0 = time.perf_counter()
        err = float(registry[name](seed))
        out.append({"op": name, "max_rel_error": err, "passed": bool(err < tol),
                    "seconds": time.perf_counter() - t0})
    return out
