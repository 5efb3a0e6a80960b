"""Central finite-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, backward, no_grad


def numerical_gradient(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-3) -> np.ndarray:
    flat = t.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(flat[i])
            fp = float(fn().data.sum(dtype=np.float64))
            flat[i] = orig - h
            down = float(flat[i])
            fm = float(fn().data.sum(dtype=np.float64))
            flat[i] = orig
            # the realised step differs from 2h once rounded to the tensor dtype
            grad[i] = (fp - fm) / (up - down)
    return grad.reshape(t.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float | None = None) -> float:
    """Largest elementwise deviation, relative to the gradient's magnitude.

    The denominator defaults to the larger infinity norm of the two gradients,
    so entries whose true derivative is near zero are judged on the scale of
    the whole gradient rather than on their own.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if scale is None:
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-3) -> list[float]:
    """Compare backward() against central differences for each tensor.

    ``fn`` must rebuild the scalar loss from the current tensor values.
    Returns one relative error per tensor, each measured against the infinity
    norm of the full gradient over all ``tensors``.  A tensor whose true
    gradient vanishes (a bias feeding batch norm, say) is then judged by how
    far it strays from zero, not by the ratio of two rounding residues.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    backward(fn())
    pairs = []
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        pairs.append((analytic, numerical_gradient(fn, t, h)))
    scale = max(max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for a, n in pairs)
    return [relative_error(a, n, scale) for a, n in pairs]
