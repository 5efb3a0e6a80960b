"""SliceFusion, SE, CBAM, FiLM and ASPP blocks."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import RangeError, ShapeError
from ..tensor import ops
from ..tensor.core import Tensor, as_tensor
from .layers import BatchNorm2d, Conv2d, ConvBNAct, Linear
from .module import Module


class SliceFusion(Module):
    """Collapse a 3-slice stack to one channel: conv3×3(16) → BN → SiLU → conv1×1(1)."""

    def __init__(self, in_slices: int = 3, width: int = 16):
        super().__init__()
        self.in_slices = in_slices
        self.conv1 = Conv2d(in_slices, width, 3)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, 1, 1)

    def forward(self, stack: Tensor) -> Tensor:
        if stack.ndim != 4 or stack.shape[1] != self.in_slices:
            raise ShapeError(f"SliceFusion expects N×{self.in_slices}×H×W, got {stack.shape}")
        return self.conv2(ops.silu(self.bn1(self.conv1(stack))))


def _hidden(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


class SEGate(Module):
    """Squeeze-and-excitation channel gate.

    ``gate_scale`` multiplies the sigmoid gate.  It stays 1 in normal use;
    :meth:`force_identity` zeroes the weights (gate = 0.5) and sets it to 2 so
    the block passes its input through bit-exactly.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        self.channels = channels
        hidden = _hidden(channels, reduction)
        self.reduce = Linear(channels, hidden)
        self.expand = Linear(hidden, channels)
        self.gate_scale = 1.0

    def gate(self, x: Tensor) -> Tensor:
        g = ops.sigmoid(self.expand(ops.relu(self.reduce(ops.global_avg_pool(x)))))
        if self.gate_scale != 1.0:
            g = g * self.gate_scale
        return g

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"SEGate({self.channels}) got input {x.shape}")
        g = self.gate(x)
        return x * ops.reshape(g, (x.shape[0], self.channels, 1, 1))

    def force_identity(self) -> None:
        for p in self.parameters():
            p.data[...] = 0
        self.gate_scale = 2.0


class CBAM(Module):
    """Channel gate (shared MLP over avg/max descriptors) followed by a 7×7 spatial gate."""

    def __init__(self, channels: int, reduction: int = 16, kernel: int = 7):
        super().__init__()
        self.channels = channels
        hidden = _hidden(channels, reduction)
        self.fc1 = Linear(channels, hidden)
        self.fc2 = Linear(hidden, channels)
        self.spatial = Conv2d(2, 1, kernel, padding=kernel // 2)
        self.gate_scale = 1.0

    def _mlp(self, v: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(v)))

    def channel_gate(self, x: Tensor) -> Tensor:
        mc = ops.sigmoid(self._mlp(ops.global_avg_pool(x)) + self._mlp(ops.global_max_pool(x)))
        if self.gate_scale != 1.0:
            mc = mc * self.gate_scale
        return ops.reshape(mc, (x.shape[0], self.channels, 1, 1))

    def spatial_gate(self, x: Tensor) -> Tensor:
        pooled = ops.concat([ops.mean(x, axis=1, keepdims=True), ops.amax(x, axis=1, keepdims=True)], axis=1)
        ms = ops.sigmoid(self.spatial(pooled))
        if self.gate_scale != 1.0:
            ms = ms * self.gate_scale
        return ms

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"CBAM({self.channels}) got input {x.shape}")
        x = x * self.channel_gate(x)
        return x * self.spatial_gate(x)

    def force_identity(self) -> None:
        for p in self.parameters():
            p.data[...] = 0
        self.gate_scale = 2.0


class MLP3(Module):
    """1 → hidden → hidden → out perceptron with SiLU hidden activations."""

    def __init__(self, fin: int, hidden: int, fout: int):
        super().__init__()
        self.fc1 = Linear(fin, hidden)
        self.fc2 = Linear(hidden, hidden)
        self.fc3 = Linear(hidden, fout, init="zeros")

    def forward(self, x: Tensor) -> Tensor:
        return self.fc3(ops.silu(self.fc2(ops.silu(self.fc1(x)))))


class FiLM(Module):
    """Per-channel affine modulation predicted from the normalized slice position.

    The scale head predicts an offset from 1 and both output layers start at
    zero, so a freshly built block is the identity.
    """

    def __init__(self, channels: int, hidden: int = 128):
        super().__init__()
        self.channels = channels
        self.gamma_mlp = MLP3(1, hidden, channels)
        self.beta_mlp = MLP3(1, hidden, channels)

    def coefficients(self, z_norm) -> tuple[Tensor, Tensor]:
        z = as_tensor(z_norm)
        if z.ndim == 0:
            z = ops.reshape(z, (1,))
        zd = z.data
        if np.any(~np.isfinite(zd)) or np.any(zd < 0) or np.any(zd > 1):
            raise RangeError(f"z_norm must lie in [0, 1], got {zd.tolist()}")
        z = ops.reshape(z, (z.shape[0], 1))
        return 1.0 + self.gamma_mlp(z), self.beta_mlp(z)

    def forward(self, x: Tensor, z_norm) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"FiLM({self.channels}) got input {x.shape}")
        gamma, beta = self.coefficients(z_norm)
        n = gamma.shape[0]
        if n not in (1, x.shape[0]):
            raise ShapeError(f"FiLM: {n} positions for a batch of {x.shape[0]}")
        shape = (n, self.channels, 1, 1)
        return x * ops.reshape(gamma, shape) + ops.reshape(beta, shape)

    def force_identity(self) -> None:
        for head in (self.gamma_mlp, self.beta_mlp):
            head.fc3.weight.data[...] = 0
            head.fc3.bias.data[...] = 0


class ASPP(Module):
    """Atrous spatial pyramid pooling.

    Branches: one dilated 3×3 ConvBNAct per rate, an optional 1×1 ConvBNAct,
    and an optional image-pooling branch (GAP → affine, broadcast back over
    H×W).  Their concatenation is fused by a 1×1 ConvBNAct.
    """

    def __init__(self, cin: int, cout: int, rates: Sequence[int] = (1, 2, 4, 8), pointwise: bool = True,
                 pooling: bool = True):
        super().__init__()
        self.rates = tuple(rates)
        self.pointwise = pointwise
        self.pooling = pooling
        for r in self.rates:
            setattr(self, f"atrous{r}", ConvBNAct(cin, cout, 3, dilation=r))
        if pointwise:
            self.conv1x1 = ConvBNAct(cin, cout, 1)
        if pooling:
            self.image_pool = Linear(cin, cout)
        nbranch = len(self.rates) + int(pointwise) + int(pooling)
        if nbranch == 0:
            raise ShapeError("ASPP needs at least one branch")
        self.cout = cout
        self.fuse = ConvBNAct(nbranch * cout, cout, 1)

    def pool_branch(self, x: Tensor) -> Tensor:
        n, _, h, w = x.shape
        v = ops.reshape(self.image_pool(ops.global_avg_pool(x)), (n, self.cout, 1, 1))
        return ops.broadcast_to(v, (n, self.cout, h, w))

    def forward(self, x: Tensor) -> Tensor:
        branches = [getattr(self, f"atrous{r}")(x) for r in self.rates]
        if self.pointwise:
            branches.append(self.conv1x1(x))
        if self.pooling:
            branches.append(self.pool_branch(x))
        cat = branches[0] if len(branches) == 1 else ops.concat(branches, axis=1)
        return self.fuse(cat)
