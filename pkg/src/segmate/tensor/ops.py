"""Differentiable primitives on N×C×H×W float tensors."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ShapeError
from .core import Tensor, as_tensor, emit

# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    like = a if isinstance(a, Tensor) else b
    return as_tensor(a, like), as_tensor(b, like)


def _check_broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    return emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return emit("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a: Tensor) -> Tensor:
    return emit("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    out = ad**p
    return emit("pow", out, (a,), lambda g: (g * p * ad ** (p - 1),), exponent=p)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi
    return emit("clamp", out, (a,), lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return emit("relu", np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return emit("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = _sigmoid_np(ad)
    return emit("silu", ad * s, (a,), lambda g: (g * s * (1 + ad * (1 - s)),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kshape), shape),)

    return emit("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), bw, axes=axes)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    count = int(np.prod([shape[i] for i in axes])) if axes else 1
    kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kshape) / count, shape),)

    return emit("mean", a.data.mean(axis=axes, keepdims=keepdims), (a,), bw, axes=axes)


def amax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    ad = a.data
    axis = axis % a.ndim
    idx = np.argmax(ad, axis=axis)
    out = np.take_along_axis(ad, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        grad = np.zeros_like(ad)
        np.put_along_axis(grad, np.expand_dims(idx, axis), gk, axis)
        return (grad,)

    return emit("amax", out, (a,), bw, axes=(axis,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return emit("reshape", out, (a,), lambda g: (g.reshape(src),), view=True)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat along axis {ax}: {ref} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, axis=ax)


# ---------------------------------------------------------------------------
# probability helpers
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    ad = a.data
    e = np.exp(ad - ad.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return emit("softmax", s, (a,), bw, axis=axis)


def log_softmax(a: Tensor, axis: int = 1) -> Tensor:
    ad = a.data
    shifted = ad - ad.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return emit("log_softmax", out, (a,), bw, axis=axis)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy evaluated stably from logits."""
    targets = as_tensor(targets, logits)
    if logits.shape != targets.shape:
        raise ShapeError(f"bce_with_logits: {logits.shape} vs {targets.shape}")
    x, y = logits.data, targets.data
    out = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid_np(x)
    return emit("bce_with_logits", out, (logits, targets), lambda g: (g * (s - y), -g * x))


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} for weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return emit("linear", out, inputs, bw, bias=bias is not None)


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _conv_shifted(x: Tensor, weight: Tensor, bias: Tensor | None, padding: int, dilation: int, ho: int, wo: int):
    """Stride-1 convolution as one GEMM per kernel tap.

    The padded input is flattened to (Cin, N·Hp·Wp); tap (i, j) then reads a
    contiguous window shifted by i·d·Wp + j·d, so no column buffer is built.
    Outputs are computed on the padded grid and cropped.
    """
    xd, wd = x.data, weight.data
    n, cin, h, w = xd.shape
    cout, _, kh, kw = wd.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    xpad = np.zeros((cin, n, hp, wp), dtype=xd.dtype)
    xpad[:, :, padding : padding + h, padding : padding + w] = xd.transpose(1, 0, 2, 3)
    flat = xpad.reshape(cin, -1)
    offsets = [(i, j, i * dilation * wp + j * dilation) for i in range(kh) for j in range(kw)]
    length = flat.shape[1] - offsets[-1][2]
    # contiguous per-tap weights keep matmul on the BLAS path
    taps = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))
    acc = np.zeros((cout, n * hp * wp), dtype=xd.dtype)
    for i, j, off in offsets:
        acc[:, :length] += taps[i, j] @ flat[:, off : off + length]
    out = acc.reshape(cout, n, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gpad = np.zeros((cout, n, hp, wp), dtype=g.dtype)
        gpad[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gflat = gpad.reshape(cout, -1)[:, :length]
        gw = np.empty((kh, kw, cout, cin), dtype=g.dtype)
        for i, j, off in offsets:
            gw[i, j] = gflat @ flat[:, off : off + length].T
        gw = gw.transpose(2, 3, 0, 1)
        gx = None
        if x.requires_grad:
            gx_flat = np.zeros((cin, n * hp * wp), dtype=g.dtype)
            for i, j, off in offsets:
                gx_flat[:, off : off + length] += taps[i, j].T @ gflat
            gx = gx_flat.reshape(cin, n, hp, wp)[:, :, padding : padding + h, padding : padding + w]
            gx = gx.transpose(1, 0, 2, 3)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return out, bw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2D cross-correlation over an N×C×H×W input."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} must be odd")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} for {cout} output channels")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError("conv2d: stride and dilation must be >= 1, padding >= 0")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output would be {ho}x{wo} for input {h}x{w}")

    if stride == 1:
        out, bw = _conv_shifted(x, weight, bias, padding, dilation, ho, wo)
        inputs = (x, weight) if bias is None else (x, weight, bias)
        return emit("conv2d", out, inputs, bw, stride=stride, padding=padding, dilation=dilation,
                    kernel=(kh, kw), bias=bias is not None)

    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    # column buffer laid out (Cin, kh, kw, N, Ho, Wo): one GEMM covers the whole batch
    cols = np.empty((cin, kh, kw, n, ho, wo), dtype=xd.dtype)
    taps = [(i, j, np.s_[:, :, i * dilation : i * dilation + stride * (ho - 1) + 1 : stride,
                          j * dilation : j * dilation + stride * (wo - 1) + 1 : stride])
            for i in range(kh) for j in range(kw)]
    for i, j, sl in taps:
        cols[:, i, j] = xp[sl].transpose(1, 0, 2, 3)
    cols = cols.reshape(cin * kh * kw, n * ho * wo)
    wmat = wd.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        gw = (g2 @ cols.T).reshape(wd.shape)
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(cin, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i, j, sl in taps:
                gxp[sl] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return emit("conv2d", out, inputs, bw, stride=stride, padding=padding, dilation=dilation,
                kernel=(kh, kw), bias=bias is not None)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, PyTorch convention).
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects N×C×H×W input, got {x.shape}")
    c = x.shape[1]
    for nm, arr in (("gamma", gamma.shape), ("beta", beta.shape),
                    ("running_mean", running_mean.shape), ("running_var", running_var.shape)):
        if arr != (c,):
            raise ShapeError(f"batch_norm: {nm} has shape {arr}, expected ({c},)")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        m = None
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.astype(xd.dtype)[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if training:
            gx = (inv[None, :, None, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = dxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return emit("batch_norm", out, (x, gamma, beta), bw, training=training)


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects N×C×H×W, got {x.shape}")
    shape = x.shape
    hw = shape[2] * shape[3]
    return emit("global_avg_pool", x.data.mean(axis=(2, 3)), (x,),
                lambda g: (np.broadcast_to(g[:, :, None, None] / hw, shape),))


def global_max_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_max_pool expects N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)

    def bw(g):
        grad = np.zeros_like(flat)
        np.put_along_axis(grad, idx[:, :, None], g[:, :, None], 2)
        return (grad.reshape(n, c, h, w),)

    return emit("global_max_pool", np.take_along_axis(flat, idx[:, :, None], 2)[:, :, 0], (x,), bw)


def _pool_windows(x: Tensor, kernel: int, stride: int | None):
    if x.ndim != 4:
        raise ShapeError(f"pooling expects N×C×H×W, got {x.shape}")
    stride = stride or kernel
    h, w = x.shape[2:]
    if kernel > h or kernel > w:
        raise ShapeError(f"pool kernel {kernel} larger than input {h}x{w}")
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    return win[:, :, :ho, :wo], stride, ho, wo


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    win, stride, ho, wo = _pool_windows(x, kernel, stride)
    flat = win.reshape(*win.shape[:4], kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], -1)[..., 0]
    shape = x.shape

    def bw(g):
        grad = np.zeros(shape, dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                sel = g * (arg == i * kernel + j)
                grad[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += sel
        return (grad,)

    return emit("max_pool2d", out, (x,), bw, kernel=kernel, stride=stride)


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    win, stride, ho, wo = _pool_windows(x, kernel, stride)
    out = win.mean(axis=(-2, -1))
    shape = x.shape
    scale = 1.0 / (kernel * kernel)

    def bw(g):
        grad = np.zeros(shape, dtype=g.dtype)
        gs = g * scale
        for i in range(kernel):
            for j in range(kernel):
                grad[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gs
        return (grad,)

    return emit("avg_pool2d", out, (x,), bw, kernel=kernel, stride=stride)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return emit("upsample_nearest", out, (x,), bw, factor=factor)


def bilinear_matrix(size: int, factor: int, dtype=np.float32) -> np.ndarray:
    """Interpolation matrix (size·factor × size), align_corners=False."""
    out = size * factor
    mat = np.zeros((out, size), dtype=np.float64)
    for o in range(out):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        w1 = src - i0
        mat[o, i0] += 1.0 - w1
        mat[o, i1] += w1
    return mat.astype(dtype)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear expects N×C×H×W, got {x.shape}")
    if factor == 1:
        return emit("upsample_bilinear", x.data.copy(), (x,), lambda g: (g,), factor=1)
    h, w = x.shape[2:]
    ah = bilinear_matrix(h, factor, x.dtype)
    aw = bilinear_matrix(w, factor, x.dtype)
    out = ah @ x.data @ aw.T

    def bw(g):
        return (ah.T @ g @ aw,)

    return emit("upsample_bilinear", out, (x,), bw, factor=factor)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Materialize ``x`` at a broadcast-compatible larger shape."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from exc
    return emit("broadcast_to", out.copy(), (x,), lambda g: (g,))
