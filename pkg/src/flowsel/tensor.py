"""A small reverse-mode autodiff engine over float64 numpy arrays.

It covers exactly what the adapter pipeline needs: same-padded 3x3 / 1x1
convolutions (dense or depthwise), batch norm, 2x2 average pooling,
nearest-neighbour resampling, a handful of elementwise ops and an MSE loss.
Broadcasting is limited to scalar operands.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them. ``Tensor.backward``
orders the graph topologically (deterministic DFS over parents in argument
order) and runs the closures in exact reverse order.
"""

from __future__ import annotations

import contextlib
import json
import math
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ShapeError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Optional[Callable] = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None) -> None:
        """Backpropagate from this tensor (a scalar loss unless ``grad`` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        for node in order:
            if node._backward is not None:
                node.grad = None
        self._accumulate(np.asarray(grad, dtype=DTYPE))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior grads are not needed once propagated
                node.grad = None


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


class Param(Tensor):
    """A named leaf tensor; only ``trainable`` params are updated by SGD."""

    __slots__ = ("name", "trainable", "velocity")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.velocity: Optional[np.ndarray] = None
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g):
        self.grad += g

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.requires_grad = flag

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def _result(data, parents, op, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), op=op)
    if req:
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()).reshape(t.shape) if _is_scalar(t) and g.size != 1 else g


def _check_binary(x: Tensor, y: Tensor, op: str):
    if x.shape != y.shape and not (_is_scalar(x) or _is_scalar(y)):
        raise ShapeError(f"{op}: shapes {x.shape} and {y.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _check_binary(x, y, "add")

    def backward(g):
        if x.requires_grad:
            x._accumulate(_reduce_to(g, x))
        if y.requires_grad:
            y._accumulate(_reduce_to(g, y))

    return _result(x.data + y.data, (x, y), "add", backward)


def mul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _check_binary(x, y, "mul")

    def backward(g):
        if x.requires_grad:
            x._accumulate(_reduce_to(g * y.data, x))
        if y.requires_grad:
            y._accumulate(_reduce_to(g * x.data, y))

    return _result(x.data * y.data, (x, y), "mul", backward)


def scale_add(x, a, y) -> Tensor:
    """``x + a * y`` with ``a`` a scalar tensor."""
    x, a, y = as_tensor(x), as_tensor(a), as_tensor(y)
    if not _is_scalar(a):
        raise ShapeError("scale_add: coefficient must be a scalar")
    if x.shape != y.shape:
        raise ShapeError(f"scale_add: shapes {x.shape} and {y.shape} differ")
    av = a.data.reshape(())

    def backward(g):
        if x.requires_grad:
            x._accumulate(g)
        if y.requires_grad:
            y._accumulate(g * av)
        if a.requires_grad:
            a._accumulate(np.asarray((g * y.data).sum()).reshape(a.shape))

    return _result(x.data + av * y.data, (x, a, y), "scale_add", backward)


def affine(x, scale: float, shift: float) -> Tensor:
    """``scale * x + shift`` with constant coefficients."""
    x = as_tensor(x)

    def backward(g):
        x._accumulate(g * scale)

    return _result(scale * x.data + shift, (x,), "affine", backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    _KinkTrace.record(x.data)

    def backward(g):
        x._accumulate(g * mask)

    return _result(np.maximum(x.data, 0.0), (x,), "relu", backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)

    def backward(g):
        x._accumulate(g * s * (1.0 - s))

    return _result(s, (x,), "sigmoid", backward)


def softmax(x) -> Tensor:
    """Softmax over a 1-D tensor."""
    x = as_tensor(x)
    if x.data.ndim != 1:
        raise ShapeError("softmax expects a vector")
    e = np.exp(x.data - x.data.max())
    s = e / e.sum()

    def backward(g):
        x._accumulate(s * (g - (g * s).sum()))

    return _result(s, (x,), "softmax", backward)


def index(x, i: int) -> Tensor:
    """Element ``i`` of a 1-D tensor, as a scalar tensor."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[i] = g.reshape(())
        x._accumulate(full)

    return _result(x.data[i].reshape(()), (x,), "index", backward)


def detach(x) -> Tensor:
    """Value-identical leaf; nothing flows back through it."""
    x = as_tensor(x)
    return Tensor(x.data.copy(), requires_grad=False, op="detach")


# ---------------------------------------------------------------- conv family


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, k, groups: int = 1, bias=None) -> Tensor:
    """Stride-1, same-padded convolution with a 1x1 or 3x3 kernel.

    ``groups`` is 1 (dense, kernel ``(O, C, kh, kw)``) or ``C`` (depthwise,
    kernel ``(C, 1, kh, kw)``). ``bias`` is an optional ``(O,)`` tensor.
    """
    x, k = as_tensor(x), as_tensor(k)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    N, C, H, W = x.shape
    O, Cg, kh, kw = k.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}")
    if groups == 1:
        if Cg != C:
            raise ShapeError(f"conv2d: kernel expects {Cg} channels, input has {C}")
    elif groups == C:
        if Cg != 1 or O != C:
            raise ShapeError("depthwise conv2d needs a (C, 1, k, k) kernel")
    else:
        raise ShapeError(f"conv2d: groups must be 1 or C={C}, got {groups}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")
    p = kh // 2
    xp = _pad(x.data, p) if groups != 1 else None
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    kd = k.data

    if groups == 1:
        # channel-major im2col: cols[(c, tap), (n, h, w)], one matmul per call
        xc = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3))
        if kh == 1:
            cols = xc.reshape(C, N * H * W)
        else:
            xcp = np.pad(xc, ((0, 0), (0, 0), (p, p), (p, p)))
            cols = np.stack([xcp[:, :, i:i + H, j:j + W] for i, j in offsets], axis=1)
            cols = cols.reshape(C * kh * kw, N * H * W)
        kmat = kd.reshape(O, C * kh * kw)
        out = (kmat @ cols).reshape(O, N, H, W).transpose(1, 0, 2, 3)
    else:
        out = np.zeros((N, C, H, W))
        for i, j in offsets:
            out += kd[None, :, 0, i, j, None, None] * xp[:, :, i:i + H, j:j + W]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        if groups == 1:
            g2 = g.transpose(1, 0, 2, 3).reshape(O, N * H * W)
            if k.requires_grad:
                k._accumulate((g2 @ cols.T).reshape(k.shape))
            if x.requires_grad:
                dcols = kmat.T @ g2
                if kh == 1:
                    dxc = dcols.reshape(C, N, H, W)
                else:
                    dcols = dcols.reshape(C, kh * kw, N, H, W)
                    dxcp = np.zeros((C, N, H + 2 * p, W + 2 * p))
                    for t, (i, j) in enumerate(offsets):
                        dxcp[:, :, i:i + H, j:j + W] += dcols[:, t]
                    dxc = dxcp[:, :, p:p + H, p:p + W]
                x._accumulate(dxc.transpose(1, 0, 2, 3))
        else:
            if k.requires_grad:
                dk = np.zeros_like(kd)
                for i, j in offsets:
                    dk[:, 0, i, j] = (g * xp[:, :, i:i + H, j:j + W]).sum(axis=(0, 2, 3))
                k._accumulate(dk)
            if x.requires_grad:
                dxp = np.zeros_like(xp)
                for i, j in offsets:
                    dxp[:, :, i:i + H, j:j + W] += g * kd[None, :, 0, i, j, None, None]
                x._accumulate(dxp[:, :, p:p + H, p:p + W] if p else dxp)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, k) if bias is None else (x, k, bias)
    return _result(out, parents, "conv2d", backward)


def batchnorm(x, scale, shift, eps: float = 1e-5, mode: str = "batch",
              running: Optional[dict] = None, momentum: float = 0.1) -> Tensor:
    """Per-channel normalization over ``(N, H, W)``.

    ``mode="batch"`` normalizes with the batch statistics and, if ``running``
    is a dict holding ``mean``/``var`` arrays, updates them in place with the
    given momentum. ``mode="frozen"`` normalizes with ``running`` instead.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    C = x.shape[1]
    if scale.shape != (C,) or shift.shape != (C,):
        raise ShapeError(f"batchnorm: expected ({C},) scale/shift, got {scale.shape}/{shift.shape}")
    sc = scale.data[None, :, None, None]
    sh = shift.data[None, :, None, None]

    if mode == "frozen":
        if running is None:
            raise ValueError("frozen batchnorm needs running statistics")
        inv = 1.0 / np.sqrt(running["var"] + eps)
        xhat = (x.data - running["mean"][None, :, None, None]) * inv[None, :, None, None]

        def backward(g):
            if x.requires_grad:
                x._accumulate(g * sc * inv[None, :, None, None])
            if scale.requires_grad:
                scale._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if shift.requires_grad:
                shift._accumulate(g.sum(axis=(0, 2, 3)))

        return _result(xhat * sc + sh, (x, scale, shift), "batchnorm", backward)

    if mode != "batch":
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    axes = (0, 2, 3)
    count = x.data.size // C
    mean = x.data.mean(axis=axes)
    centered = x.data - mean[None, :, None, None]
    var = (centered * centered).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv[None, :, None, None]
    if running is not None:
        running["mean"] *= 1.0 - momentum
        running["mean"] += momentum * mean
        running["var"] *= 1.0 - momentum
        running["var"] += momentum * var

    def backward(g):
        if x.requires_grad:
            gx = g * sc
            m1 = gx.mean(axis=axes, keepdims=True)
            m2 = (gx * xhat).mean(axis=axes, keepdims=True)
            x._accumulate((gx - m1 - xhat * m2) * inv[None, :, None, None])
        if scale.requires_grad:
            scale._accumulate((g * xhat).sum(axis=axes))
        if shift.requires_grad:
            shift._accumulate(g.sum(axis=axes))

    del count
    return _result(xhat * sc + sh, (x, scale, shift), "batchnorm", backward)


def avgpool2(x) -> Tensor:
    """2x2 stride-2 average pool; an odd trailing row/column is dropped."""
    x = as_tensor(x)
    N, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"avgpool2 needs spatial dims >= 2, got {H}x{W}")
    crop = x.data[:, :, :2 * Ho, :2 * Wo]
    out = crop.reshape(N, C, Ho, 2, Wo, 2).mean(axis=(3, 5))

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, :, :2 * Ho, :2 * Wo] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        x._accumulate(dx)

    return _result(out, (x,), "avgpool2", backward)


def gather2d(x, rows: np.ndarray, cols: np.ndarray, valid: np.ndarray) -> Tensor:
    """Nearest-neighbour resampling with per-sample index maps.

    ``rows``, ``cols`` and ``valid`` have shape ``(N, Ho, Wo)`` (or
    ``(Ho, Wo)``, shared by all samples). Output cell ``(n, c, i, j)`` copies
    ``x[n, c, rows, cols]`` where ``valid`` and is zero elsewhere.
    """
    x = as_tensor(x)
    N, C, H, W = x.shape
    if rows.ndim == 2:
        rows, cols, valid = (np.broadcast_to(a, (N,) + a.shape) for a in (rows, cols, valid))
    Ho, Wo = rows.shape[1:]
    r = np.where(valid, rows, 0)
    c = np.where(valid, cols, 0)
    n_idx = np.broadcast_to(np.arange(N)[:, None, None], (N, Ho, Wo))
    out = x.data[n_idx, :, r, c]  # (N, Ho, Wo, C)
    out = np.where(valid[..., None], out, 0.0).transpose(0, 3, 1, 2)

    def backward(g):
        dx = np.zeros_like(x.data)
        gv = np.where(valid[..., None], g.transpose(0, 2, 3, 1), 0.0)
        flat = dx.transpose(0, 2, 3, 1)  # view (N, H, W, C)
        np.add.at(flat, (n_idx, r, c), gv)
        x._accumulate(dx)

    return _result(np.ascontiguousarray(out), (x,), "gather2d", backward)


def upsample_nearest(x, target_h: int, target_w: int) -> Tensor:
    x = as_tensor(x)
    H, W = x.shape[2:]
    ri = (np.arange(target_h) * H) // target_h
    ci = (np.arange(target_w) * W) // target_w
    rows = np.broadcast_to(ri[:, None], (target_h, target_w))
    cols = np.broadcast_to(ci[None, :], (target_h, target_w))
    return gather2d(x, rows, cols, np.ones((target_h, target_w), dtype=bool))


def select_rows(x, idx: Sequence[int]) -> Tensor:
    """Batch-axis gather ``x[idx]``; repeated indices are allowed."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        x._accumulate(dx)

    return _result(x.data[idx], (x,), "select_rows", backward)


def group_mean(x, group_size: int) -> Tensor:
    """Mean over consecutive batch groups: ``(B*G, ...) -> (B, ...)``."""
    x = as_tensor(x)
    N = x.shape[0]
    if N % group_size:
        raise ShapeError(f"batch {N} is not a multiple of group size {group_size}")
    B = N // group_size
    out = x.data.reshape((B, group_size) + x.shape[1:]).mean(axis=1)

    def backward(g):
        x._accumulate(np.repeat(g, group_size, axis=0) / group_size)

    return _result(out, (x,), "group_mean", backward)


def mse_loss(pred, target) -> Tensor:
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if t.shape != pred.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {t.shape} differ")
    diff = pred.data - t

    def backward(g):
        pred._accumulate(g.reshape(()) * 2.0 * diff / diff.size)

    return _result(np.asarray((diff * diff).mean()), (pred,), "mse", backward)


# ---------------------------------------------------------------- modules


class Module:
    """Parameter registry: params and submodules in registration order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Param):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name, module):
        setattr(self, name, module)
        return module

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for mod in self._modules.values():
            yield from mod.modules()

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def num_params(self, trainable: Optional[bool] = None) -> int:
        return sum(p.data.size for p in self.parameters() if trainable is None or p.trainable == trainable)

    def freeze(self):
        for p in self.parameters():
            p.set_trainable(False)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_mode(self, mode: str):
        """Propagate ``"train"``/``"eval"`` to every batch norm below this module."""
        for mod in self.modules():
            if isinstance(mod, BatchNorm) and not mod.stats_frozen:
                mod.mode = "batch" if mode == "train" else "frozen"
        return self

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.named_parameters()}
        for mname, mod in self._named_modules():
            if isinstance(mod, BatchNorm):
                state[mname + "running_mean"] = mod.running["mean"]
                state[mname + "running_var"] = mod.running["var"]
        return state

    def load_state_dict(self, state: dict) -> None:
        for name, p in self.named_parameters():
            p.data[...] = state[name]
        for mname, mod in self._named_modules():
            if isinstance(mod, BatchNorm):
                mod.running["mean"][...] = state[mname + "running_mean"]
                mod.running["var"][...] = state[mname + "running_var"]

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod._named_modules(prefix + name + ".")


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, c_in, c_out, ksize, rng, groups=1, bias=False, zero_init=False, name="conv"):
        super().__init__()
        self.groups = 1 if groups == 1 else c_in
        shape = (c_out, 1 if groups != 1 else c_in, ksize, ksize)
        fan_in = shape[1] * ksize * ksize
        w = np.zeros(shape) if zero_init else he_normal(rng, shape, fan_in)
        self.weight = Param(w, name=name + ".weight")
        if bias:
            self.bias = Param(np.zeros(c_out), name=name + ".bias")
        else:
            object.__setattr__(self, "bias", None)

    def __call__(self, x):
        return conv2d(x, self.weight, self.groups, self.bias)


class BatchNorm(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1, name="bn"):
        super().__init__()
        self.scale = Param(np.ones(channels), name=name + ".scale")
        self.shift = Param(np.zeros(channels), name=name + ".shift")
        object.__setattr__(self, "running", {"mean": np.zeros(channels), "var": np.ones(channels)})
        object.__setattr__(self, "eps", eps)
        object.__setattr__(self, "momentum", momentum)
        object.__setattr__(self, "mode", "batch")
        object.__setattr__(self, "stats_frozen", False)

    def freeze_stats(self):
        """Pin this layer to its running statistics regardless of set_mode."""
        object.__setattr__(self, "stats_frozen", True)
        object.__setattr__(self, "mode", "frozen")

    def __call__(self, x):
        return batchnorm(x, self.scale, self.shift, self.eps, self.mode, self.running, self.momentum)


# ---------------------------------------------------------------- training


class SGD:
    """Momentum SGD over trainable params, updated in registration order."""

    def __init__(self, params: Iterable[Param], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        sgd_step(self.params, self.lr, self.momentum)


def sgd_step(params: Iterable[Param], lr: float, momentum: float = 0.9) -> None:
    for p in params:
        if not p.trainable:
            continue
        if p.velocity is None:
            p.velocity = np.zeros_like(p.data)
        p.velocity *= momentum
        p.velocity += p.grad
        p.data -= lr * p.velocity


def checksum(params: Iterable[Param]) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(state: dict, path) -> None:
    """JSON ``{name: {"shape": [...], "values": [...]}}``; floats round-trip exactly."""
    payload = {
        name: {"shape": list(np.shape(v)), "values": np.asarray(v, dtype=DTYPE).reshape(-1).tolist()}
        for name, v in state.items()
    }
    Path(path).write_text(json.dumps({"format_version": 1, "params": payload}))


def load_checkpoint(path) -> dict:
    payload = json.loads(Path(path).read_text())["params"]
    return {name: np.array(e["values"], dtype=DTYPE).reshape(e["shape"]) for name, e in payload.items()}


# ---------------------------------------------------------------- gradient check


class _KinkTrace:
    """Records relu inputs while active, so finite differences can skip kinks."""

    active: Optional[list] = None

    @classmethod
    def record(cls, v):
        if cls.active is not None:
            cls.active.append(v > 0)


@contextlib.contextmanager
def _trace_relu():
    prev = _KinkTrace.active
    _KinkTrace.active = []
    try:
        yield _KinkTrace.active
    finally:
        _KinkTrace.active = prev


def _same_masks(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def grad_check(loss_fn: Callable[[], Tensor], params, eps: float = 1e-3, max_coords: int = 64,
               seed: int = 0, return_details: bool = False, floor_ratio: float = 1e-3):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the graph from the current parameter values and
    returns a scalar. Up to ``max_coords`` coordinates are sampled across
    ``params``. A coordinate whose perturbation flips the sign of any relu
    input straddles a kink, where central differences are meaningless; such
    coordinates are skipped and the next candidate is taken.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``
    where ``floor`` is ``floor_ratio`` times the largest gradient magnitude
    seen. Coordinates whose gradient is tiny next to the others are thereby
    judged by absolute error on the scale of the whole gradient, which keeps
    the O(eps^2) truncation error of central differences from dominating.
    """
    if isinstance(params, Param):
        params = [params]
    params = list(params)
    for p in params:
        p.zero_grad()
    with _trace_relu() as base_masks:
        loss = loss_fn()
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    sizes = [p.data.size for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    order = rng.permutation(total)
    bounds = np.cumsum([0] + sizes)

    checked, skipped = [], 0
    for flat in order:
        if len(checked) >= max_coords:
            break
        k = int(np.searchsorted(bounds, flat, side="right") - 1)
        j = int(flat - bounds[k])
        view = params[k].data.reshape(-1)
        orig = view[j]
        view[j] = orig + eps
        with _trace_relu() as m_plus:
            f_plus = loss_fn().item()
        view[j] = orig - eps
        with _trace_relu() as m_minus:
            f_minus = loss_fn().item()
        view[j] = orig
        if not (_same_masks(base_masks, m_plus) and _same_masks(base_masks, m_minus)):
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2 * eps)
        checked.append((analytic[k].reshape(-1)[j], numeric))

    for p in params:
        p.zero_grad()
    if not checked:
        raise RuntimeError("grad_check: every sampled coordinate straddled a relu kink")
    a = np.array([c[0] for c in checked])
    n = np.array([c[1] for c in checked])
    floor = floor_ratio * max(np.abs(a).max(), np.abs(n).max(), 1e-300)
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    err = float(rel.max())
    if return_details:
        return err, {"checked": len(checked), "skipped": skipped, "analytic": a, "numeric": n}
    return err
