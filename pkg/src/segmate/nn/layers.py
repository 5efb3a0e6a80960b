from __future__ import annotations

import numpy as np

from ..tensor import ops
from ..tensor.core import Tensor
from .module import Module, Parameter

ACTIVATIONS = {"silu": ops.silu, "relu": ops.relu, "sigmoid": ops.sigmoid}


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int | None = None,
                 dilation: int = 1, bias: bool = True):
        super().__init__()
        self.stride, self.dilation = stride, dilation
        self.padding = dilation * (kernel // 2) if padding is None else padding
        fan_in = cin * kernel * kernel
        self.weight = Parameter((cout, cin, kernel, kernel), "kaiming", fan_in)
        self.bias = Parameter((cout,), "zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter((channels,), "ones")
        self.bias = Parameter((channels,), "zeros")
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, fin: int, fout: int, bias: bool = True, init: str = "kaiming"):
        super().__init__()
        self.weight = Parameter((fout, fin), init, fin)
        self.bias = Parameter((fout,), "zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class ConvBNAct(Module):
    """conv → batch norm → activation."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, dilation: int = 1,
                 act: str = "silu"):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel, stride, dilation=dilation, bias=False)
        self.bn = BatchNorm2d(cout)
        self.act = ACTIVATIONS[act]

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.bn(self.conv(x)))


class ConvBlock(Module):
    """A stack of 3×3 ConvBNAct layers; only the first may be strided."""

    def __init__(self, cin: int, cout: int, depth: int = 2, stride: int = 1):
        super().__init__()
        self.depth = depth
        for i in range(depth):
            setattr(self, f"layer{i}", ConvBNAct(cin if i == 0 else cout, cout, 3, stride if i == 0 else 1))

    def forward(self, x: Tensor) -> Tensor:
        for i in range(self.depth):
            x = getattr(self, f"layer{i}")(x)
        return x
