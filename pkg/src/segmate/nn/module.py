"""Parameter containers.

Parameters are initialised from ``(seed, qualified name)`` rather than from a
shared RNG stream, so adding or removing a block leaves every other
parameter's initial value unchanged.
"""

from __future__ import annotations

import zlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from ..errors import CheckpointError
from ..tensor.core import Tensor, scope


class Parameter(Tensor):
    """Trainable leaf tensor with an initialisation rule."""

    __slots__ = ("init", "fan_in")

    def __init__(self, shape, init: str = "zeros", fan_in: int = 1):
        super().__init__(np.zeros(shape, dtype=np.float32), requires_grad=True)
        self.init = init
        self.fan_in = fan_in


def initial_value(p: Parameter, rng: np.random.Generator) -> np.ndarray:
    if p.init == "zeros":
        return np.zeros(p.shape, dtype=np.float32)
    if p.init == "ones":
        return np.ones(p.shape, dtype=np.float32)
    if p.init == "kaiming":
        std = np.sqrt(2.0 / max(p.fan_in, 1))
        return (rng.standard_normal(p.shape) * std).astype(np.float32)
    if p.init == "uniform":
        bound = 1.0 / np.sqrt(max(p.fan_in, 1))
        return rng.uniform(-bound, bound, p.shape).astype(np.float32)
    raise ValueError(f"unknown init rule {p.init!r}")


class Module:
    training: bool

    def __init__(self) -> None:
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "_path", "")

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        args = tuple(Tensor(a) if isinstance(a, np.ndarray) else a for a in args)
        with scope(self._path or type(self).__name__):
            return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- traversal ---------------------------------------------------------
    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mname, mod in self.named_modules(prefix):
            for pname, p in mod._params.items():
                yield (f"{mname}.{pname}" if mname else pname), p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mname, mod in self.named_modules(prefix):
            for bname in mod._buffers:
                yield (f"{mname}.{bname}" if mname else bname), getattr(mod, bname)

    def assign_paths(self) -> None:
        for name, mod in self.named_modules():
            object.__setattr__(mod, "_path", name)

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def init_parameters(self, seed: int) -> None:
        for name, p in self.named_parameters():
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            p.data[...] = initial_value(p, rng)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    # -- state -------------------------------------------------------------
    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        sd: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            sd[name] = p.data.copy()
        for name, b in self.named_buffers():
            sd[name] = b.copy()
        return sd

    def load_state_dict(self, state: dict) -> None:
        """Copy tensors in; raises naming the first mismatched tensor."""
        targets = [(n, p.data) for n, p in self.named_parameters()] + list(self.named_buffers())
        for name, dst in targets:
            if name not in state:
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            src = np.asarray(state[name])
            if src.shape != dst.shape:
                raise CheckpointError(f"tensor {name!r} has shape {src.shape}, model expects {dst.shape}")
        known = {n for n, _ in targets}
        extra = [n for n in state if n not in known]
        if extra:
            raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]!r}")
        for name, dst in targets:
            dst[...] = state[name]
