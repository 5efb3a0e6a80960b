"""Scalar-loop reference kernels.

These are deliberately naive: every arithmetic operation is spelled out, so a
:class:`FlopCounter` can tally exactly what was executed.  They serve as
independent oracles for the vectorized primitives in :mod:`.ops` and for the
analytical counts in :mod:`segmate.cost`.
"""

from __future__ import annotations

import math

import numpy as np


class FlopCounter:
    def __init__(self) -> None:
        self.count = 0

    def add(self, n: int = 1) -> None:
        self.count += n


def _counter(counter):
    return counter if counter is not None else FlopCounter()


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1, counter=None):
    c = _counter(counter)
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                r = i * stride - padding + u * dilation
                                s = j * stride - padding + v * dilation
                                val = float(x[b, ci, r, s]) if 0 <= r < h and 0 <= s < w else 0.0
                                acc += val * float(weight[o, ci, u, v])
                                c.add(2)
                    if bias is not None:
                        acc += float(bias[o])
                        c.add(1)
                    out[b, o, i, j] = acc
    return out


def linear(x, weight, bias=None, counter=None):
    c = _counter(counter)
    n, fin = x.shape
    fout = weight.shape[0]
    out = np.zeros((n, fout))
    for b in range(n):
        for o in range(fout):
            acc = 0.0
            for i in range(fin):
                acc += float(x[b, i]) * float(weight[o, i])
                c.add(2)
            if bias is not None:
                acc += float(bias[o])
                c.add(1)
            out[b, o] = acc
    return out


def batch_norm_eval(x, gamma, beta, mean, var, eps=1e-5, counter=None):
    """Inference-mode normalization; per-channel scale/shift are folded first."""
    c = _counter(counter)
    n, ch, h, w = x.shape
    out = np.zeros(x.shape)
    for k in range(ch):
        scale = float(gamma[k]) / math.sqrt(float(var[k]) + eps)
        shift = float(beta[k]) - float(mean[k]) * scale
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    out[b, k, i, j] = float(x[b, k, i, j]) * scale + shift
                    c.add(2)
    return out


def batch_norm_train(x, gamma, beta, eps=1e-5, counter=None):
    """Normalization with batch statistics (biased variance)."""
    c = _counter(counter)
    n, ch, h, w = x.shape
    m = n * h * w
    out = np.zeros(x.shape)
    for k in range(ch):
        vals = [float(x[b, k, i, j]) for b in range(n) for i in range(h) for j in range(w)]
        mu = math.fsum(vals) / m
        var = math.fsum((v - mu) ** 2 for v in vals) / m
        scale = float(gamma[k]) / math.sqrt(var + eps)
        shift = float(beta[k]) - mu * scale
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    out[b, k, i, j] = float(x[b, k, i, j]) * scale + shift
                    c.add(2)
    return out


def _elementwise(x, fn, counter):
    c = _counter(counter)
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    out = np.empty_like(flat)
    for i, v in enumerate(flat):
        out[i] = fn(float(v))
        c.add(1)
    return out.reshape(np.shape(x))


def _sig(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def sigmoid(x, counter=None):
    return _elementwise(x, _sig, counter)


def silu(x, counter=None):
    return _elementwise(x, lambda v: v * _sig(v), counter)


def relu(x, counter=None):
    return _elementwise(x, lambda v: v if v > 0 else 0.0, counter)


def _pool(x, kernel, stride, reduce_fn, counter):
    c = _counter(counter)
    stride = stride or kernel
    n, ch, h, w = x.shape
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    out = np.zeros((n, ch, ho, wo))
    for b in range(n):
        for k in range(ch):
            for i in range(ho):
                for j in range(wo):
                    vals = []
                    for u in range(kernel):
                        for v in range(kernel):
                            vals.append(float(x[b, k, i * stride + u, j * stride + v]))
                            c.add(1)
                    out[b, k, i, j] = reduce_fn(vals)
    return out


def max_pool2d(x, kernel, stride=None, counter=None):
    return _pool(x, kernel, stride, max, counter)


def avg_pool2d(x, kernel, stride=None, counter=None):
    return _pool(x, kernel, stride, lambda v: math.fsum(v) / len(v), counter)


def global_avg_pool(x, counter=None):
    c = _counter(counter)
    n, ch, h, w = x.shape
    out = np.zeros((n, ch))
    for b in range(n):
        for k in range(ch):
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    acc += float(x[b, k, i, j])
                    c.add(1)
            out[b, k] = acc / (h * w)
    return out


def upsample_bilinear(x, factor, counter=None):
    """Four-tap interpolation with half-pixel centers (align_corners=False)."""
    c = _counter(counter)
    n, ch, h, w = x.shape
    out = np.zeros((n, ch, h * factor, w * factor))

    def taps(o, size):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(math.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        return i0, i1, src - i0

    for b in range(n):
        for k in range(ch):
            for i in range(h * factor):
                r0, r1, wr = taps(i, h)
                for j in range(w * factor):
                    s0, s1, ws = taps(j, w)
                    out[b, k, i, j] = (
                        (1 - wr) * (1 - ws) * x[b, k, r0, s0]
                        + (1 - wr) * ws * x[b, k, r0, s1]
                        + wr * (1 - ws) * x[b, k, r1, s0]
                        + wr * ws * x[b, k, r1, s1]
                    )
                    c.add(7)
    return out
