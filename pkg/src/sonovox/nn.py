"""Minimal reverse-mode autodiff over numpy, sized for a 3D U-Net.

Tensors wrap numpy arrays of shape [batch, channels, D, H, W]; each op
records a closure that routes the upstream gradient to its parents.
Convolutions run as chunked im2col matmuls so memory stays bounded on
full-size volumes. All math happens in the dtype of the inputs (float64
for the verification suite, float32 for speed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Array = np.ndarray

_CONV_CHUNK_BYTES = 1 << 26


class ShapeError(ValueError):
    """Operand shapes disagree; the message names the offending axis."""


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _result(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _accumulate(t: Tensor, grad: Array) -> None:
    if t.requires_grad:
        t.grad = grad if t.grad is None else t.grad + grad


def _conv3d_raw(x: Array, w: Array) -> Array:
    """Stride-1 same-padding cross-correlation; odd kernels only."""
    b, ci, d, h, wd = x.shape
    co, _, kd, kh, kw = w.shape
    pd, ph, pw = kd // 2, kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    wm = w.reshape(co, -1).T
    k3 = ci * kd * kh * kw
    out = np.empty((b, co, d, h, wd), dtype=x.dtype)
    step = max(1, _CONV_CHUNK_BYTES // max(1, k3 * x.dtype.itemsize * h * wd))
    for d0 in range(0, d, step):
        d1 = min(d0 + step, d)
        win = sliding_window_view(xp[:, :, d0:d1 + 2 * pd], (kd, kh, kw), axis=(2, 3, 4))
        cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(b, (d1 - d0) * h * wd, k3)
        res = cols @ wm
        out[:, :, d0:d1] = res.transpose(0, 2, 1).reshape(b, co, d1 - d0, h, wd)
    return out


def _conv3d_weight_grad(x: Array, g: Array, wshape: tuple[int, ...]) -> Array:
    b, ci, d, h, wd = x.shape
    co, _, kd, kh, kw = wshape
    pd, ph, pw = kd // 2, kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    k3 = ci * kd * kh * kw
    gw = np.zeros((co, k3), dtype=x.dtype)
    step = max(1, _CONV_CHUNK_BYTES // max(1, k3 * x.dtype.itemsize * h * wd))
    for d0 in range(0, d, step):
        d1 = min(d0 + step, d)
        win = sliding_window_view(xp[:, :, d0:d1 + 2 * pd], (kd, kh, kw), axis=(2, 3, 4))
        cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(b, (d1 - d0) * h * wd, k3)
        gcol = g[:, :, d0:d1].reshape(b, co, -1)
        gw += np.einsum("bcn,bnk->ck", gcol, cols)
    return gw.reshape(co, ci, kd, kh, kw)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3D cross-correlation with same padding plus per-channel bias."""
    if x.data.ndim != 5:
        raise ShapeError(f"input must be 5D [B, C, D, H, W], got {x.data.ndim}D")
    if weight.data.shape[1] != x.data.shape[1]:
        raise ShapeError(f"channel axis mismatch: input has {x.data.shape[1]}, kernel expects {weight.data.shape[1]}")
    if any(k % 2 == 0 for k in weight.data.shape[2:]):
        raise ShapeError(f"kernel dims must be odd for same padding, got {weight.data.shape[2:]}")
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(f"bias axis mismatch: expected ({weight.data.shape[0]},), got {bias.data.shape}")
    y = _conv3d_raw(x.data, weight.data) + bias.data[None, :, None, None, None]

    def backward(g: Array) -> None:
        _accumulate(bias, g.sum(axis=(0, 2, 3, 4)))
        if weight.requires_grad:
            _accumulate(weight, _conv3d_weight_grad(x.data, g, weight.data.shape))
        if x.requires_grad:
            w_t = weight.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
            _accumulate(x, _conv3d_raw(g, np.ascontiguousarray(w_t)))

    return _result(y, (x, weight, bias), backward)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def backward(g: Array) -> None:
        _accumulate(x, g * (x.data > 0))

    return _result(y, (x,), backward)


def maxpool3d(x: Tensor, factor: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial dims must divide the factor."""
    b, c, d, h, w = x.data.shape
    for name, dim in (("D", d), ("H", h), ("W", w)):
        if dim % factor:
            raise ShapeError(f"{name} axis ({dim}) not divisible by pooling factor {factor}")
    f = factor
    d2, h2, w2 = d // f, h // f, w // f
    xr = (x.data.reshape(b, c, d2, f, h2, f, w2, f)
          .transpose(0, 1, 2, 4, 6, 3, 5, 7)
          .reshape(b, c, d2, h2, w2, f ** 3))
    idx = xr.argmax(axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def backward(g: Array) -> None:
        gflat = np.zeros_like(xr)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = (gflat.reshape(b, c, d2, h2, w2, f, f, f)
              .transpose(0, 1, 2, 5, 3, 6, 4, 7)
              .reshape(b, c, d, h, w))
        _accumulate(x, gx)

    return _result(y, (x,), backward)


def upconv3d(x: Tensor, weight: Tensor, bias: Tensor, factor: int = 2) -> Tensor:
    """Transposed conv with kernel = stride = factor: doubles each spatial dim."""
    b, ci, d, h, w = x.data.shape
    if weight.data.shape[0] != ci:
        raise ShapeError(f"channel axis mismatch: input has {ci}, kernel expects {weight.data.shape[0]}")
    if weight.data.shape[2:] != (factor, factor, factor):
        raise ShapeError(f"upconv kernel must be {(factor,) * 3}, got {weight.data.shape[2:]}")
    co = weight.data.shape[1]
    y6 = np.einsum("bcdhw,coijk->bodihjwk", x.data, weight.data)
    y = y6.reshape(b, co, d * factor, h * factor, w * factor) + bias.data[None, :, None, None, None]

    def backward(g: Array) -> None:
        g6 = g.reshape(b, co, d, factor, h, factor, w, factor)
        _accumulate(bias, g.sum(axis=(0, 2, 3, 4)))
        if weight.requires_grad:
            _accumulate(weight, np.einsum("bcdhw,bodihjwk->coijk", x.data, g6))
        if x.requires_grad:
            _accumulate(x, np.einsum("bodihjwk,coijk->bcdhw", g6, weight.data))

    return _result(y, (x, weight, bias), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(f"spatial/batch axes differ: {a.data.shape} vs {b.data.shape}")
    y = np.concatenate([a.data, b.data], axis=1)
    ca = a.data.shape[1]

    def backward(g: Array) -> None:
        _accumulate(a, g[:, :ca])
        _accumulate(b, g[:, ca:])

    return _result(y, (a, b), backward)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-voxel distribution over channels, stable under max subtraction."""
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g: Array) -> None:
        _accumulate(x, s * (g - (g * s).sum(axis=1, keepdims=True)))

    return _result(s, (x,), backward)


def dice_loss(pred: Tensor, target: Array, smooth: float = 1e-5) -> Tensor:
    """1 - mean per-class Dice over all voxels in the batch.

    ``target`` is a constant one-hot array with pred's shape; gradients
    flow only through ``pred``.
    """
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.data.shape:
        raise ShapeError(f"target shape {t.shape} differs from prediction {pred.data.shape}")
    axes = (0, 2, 3, 4)
    inter = (pred.data * t).sum(axis=axes)
    psum = pred.data.sum(axis=axes)
    tsum = t.sum(axis=axes)
    num = 2.0 * inter + smooth
    den = psum + tsum + smooth
    dice = num / den
    n_classes = dice.shape[0]
    loss = np.asarray(1.0 - dice.mean(), dtype=pred.data.dtype)

    def backward(g: Array) -> None:
        scale = float(g) / n_classes
        coef1 = (2.0 / den).reshape(1, -1, 1, 1, 1)
        coef2 = (num / den ** 2).reshape(1, -1, 1, 1, 1)
        _accumulate(pred, -scale * (coef1 * t - coef2))

    return _result(loss, (pred,), backward)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Array:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)
    step: int = 0


def init_adam(params: dict[str, Array]) -> AdamState:
    return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()},
                     step=0)


def adam_step(params: dict[str, Array], grads: dict[str, Array], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict[str, Array], AdamState]:
    """One Adam update with bias correction; mutates params/state in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} differs from parameter {p.shape} for {k}")
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state
