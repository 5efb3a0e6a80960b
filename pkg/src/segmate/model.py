"""SegMate network and its vanilla U-Net baseline, built from one config."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import ASPP, CBAM, Conv2d, ConvBlock, FiLM, Linear, Module, SEGate, SliceFusion
from .tensor import ops
from .tensor.core import Tensor, as_tensor

MAX_DECODER_WIDTH = 160


@dataclass
class SegMateConfig:
    """Architecture description.

    ``decoder_widths`` are listed deepest level first; level ``j`` fuses with
    encoder stage ``len(encoder_widths) - 2 - j``.  Without the asymmetric
    decoder the widths mirror the encoder and the bottleneck keeps the deepest
    encoder width.
    """

    encoder_widths: tuple[int, ...] = (16, 32, 64, 128)
    decoder_widths: tuple[int, ...] = (32, 16, 8)
    bottleneck_width: int = 64
    aspp_rates: tuple[int, ...] = (1, 2, 4, 8)
    num_classes: int = 4
    input_size: tuple[int, int] = (48, 48)
    in_slices: int = 3
    fusion_width: int = 16
    film_hidden: int = 128
    se_reduction: int = 16
    cbam_reduction: int = 16
    encoder_depth: int = 2
    decoder_depth: int = 2
    upsample: str = "bilinear"
    use_slice_fusion: bool = True
    use_asymmetric_decoder: bool = True
    use_nested: bool = True
    use_cbam: bool = True
    use_se: bool = True
    use_film: bool = True
    use_boundary_head: bool = True
    use_presence_head: bool = True

    @classmethod
    def segmate(cls, **overrides) -> "SegMateConfig":
        return cls(**overrides)

    @classmethod
    def vanilla(cls, **overrides) -> "SegMateConfig":
        """Mirrored decoder, no attention, no FiLM, no SliceFusion, seg head only."""
        base = dict(
            use_slice_fusion=False,
            use_asymmetric_decoder=False,
            use_nested=False,
            use_cbam=False,
            use_se=False,
            use_film=False,
            use_boundary_head=False,
            use_presence_head=False,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def num_stages(self) -> int:
        return len(self.encoder_widths)

    @property
    def effective_decoder_widths(self) -> tuple[int, ...]:
        if self.use_asymmetric_decoder:
            return tuple(self.decoder_widths)
        return tuple(reversed(self.encoder_widths[:-1]))

    @property
    def effective_bottleneck_width(self) -> int:
        return self.bottleneck_width if self.use_asymmetric_decoder else self.encoder_widths[-1]

    def validate(self) -> "SegMateConfig":
        if len(self.encoder_widths) < 2:
            raise ConfigError("encoder_widths", "need at least two stages")
        if any(w < 1 for w in self.encoder_widths):
            raise ConfigError("encoder_widths", "widths must be positive")
        if len(self.decoder_widths) != len(self.encoder_widths) - 1:
            raise ConfigError(
                "decoder_widths",
                f"expected {len(self.encoder_widths) - 1} levels for {len(self.encoder_widths)} encoder stages,"
                f" got {len(self.decoder_widths)}",
            )
        if any(w < 1 for w in self.decoder_widths):
            raise ConfigError("decoder_widths", "widths must be positive")
        if self.use_asymmetric_decoder and max(self.decoder_widths) > MAX_DECODER_WIDTH:
            raise ConfigError("decoder_widths", f"asymmetric decoder is capped at {MAX_DECODER_WIDTH} channels")
        if self.use_asymmetric_decoder and self.bottleneck_width > MAX_DECODER_WIDTH:
            raise ConfigError("bottleneck_width", f"asymmetric bottleneck is capped at {MAX_DECODER_WIDTH} channels")
        if self.bottleneck_width < 1:
            raise ConfigError("bottleneck_width", "must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes", "need background plus at least one organ")
        if not self.aspp_rates or any(r < 1 for r in self.aspp_rates):
            raise ConfigError("aspp_rates", "need at least one rate >= 1")
        div = 2 ** (self.num_stages - 1)
        if len(self.input_size) != 2 or any(s < 1 or s % div for s in self.input_size):
            raise ConfigError("input_size", f"H and W must be positive multiples of {div}")
        if self.use_se and not self.use_nested:
            raise ConfigError("use_se", "SE gates live on nested nodes; enable use_nested")
        if self.upsample not in ("bilinear", "nearest"):
            raise ConfigError("upsample", f"unknown mode {self.upsample!r}")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ConfigError("encoder_depth", "block depth must be >= 1")
        return self

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SegMateConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config field")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class NetworkOutput:
    seg_logits: Tensor
    boundary_logits: Tensor | None = None
    presence_logits: Tensor | None = None
    extras: dict = field(default_factory=dict)


class Encoder(Module):
    def __init__(self, cin: int, widths, depth: int):
        super().__init__()
        self.n = len(widths)
        prev = cin
        for i, w in enumerate(widths):
            setattr(self, f"stage{i}", ConvBlock(prev, w, depth, stride=1 if i == 0 else 2))
            prev = w

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for i in range(self.n):
            x = getattr(self, f"stage{i}")(x)
            feats.append(x)
        return feats


class DecoderLevel(Module):
    """Upsampled deeper features ⊕ encoder skip → [CBAM] → conv block."""

    def __init__(self, deep_c: int, skip_c: int, width: int, depth: int, cbam: bool, reduction: int):
        super().__init__()
        self.cbam = CBAM(deep_c + skip_c, reduction) if cbam else None
        self.conv = ConvBlock(deep_c + skip_c, width, depth)

    def forward(self, up: Tensor, skip: Tensor) -> Tensor:
        x = ops.concat([up, skip], axis=1)
        if self.cbam is not None:
            x = self.cbam(x)
        return self.conv(x)


class NestedNode(Module):
    """Fuses two adjacent decoder levels, optionally SE-gated."""

    def __init__(self, fine_c: int, coarse_c: int, width: int, se: bool, reduction: int):
        super().__init__()
        self.conv = ConvBlock(fine_c + coarse_c, width, 1)
        self.se = SEGate(width, reduction) if se else None

    def forward(self, fine: Tensor, coarse_up: Tensor) -> Tensor:
        x = self.conv(ops.concat([fine, coarse_up], axis=1))
        if self.se is not None:
            x = self.se(x)
        return x


class SegMateNet(Module):
    def __init__(self, config: SegMateConfig):
        super().__init__()
        cfg = config.validate()
        self.config = cfg
        enc = tuple(cfg.encoder_widths)
        dec = cfg.effective_decoder_widths
        cb = cfg.effective_bottleneck_width
        k = cfg.num_classes

        if cfg.use_slice_fusion:
            self.slice_fusion = SliceFusion(cfg.in_slices, cfg.fusion_width)
        self.encoder = Encoder(1 if cfg.use_slice_fusion else cfg.in_slices, enc, cfg.encoder_depth)
        self.aspp = ASPP(enc[-1], cb, cfg.aspp_rates)
        if cfg.use_film:
            self.film = FiLM(cb, cfg.film_hidden)
        self.n_levels = len(dec)
        prev = cb
        for j, width in enumerate(dec):
            skip_c = enc[len(enc) - 2 - j]
            setattr(self, f"dec{j}", DecoderLevel(prev, skip_c, width, cfg.decoder_depth, cfg.use_cbam,
                                                  cfg.cbam_reduction))
            if cfg.use_nested and j >= 1:
                setattr(self, f"nest{j}", NestedNode(width, dec[j - 1], width, cfg.use_se, cfg.se_reduction))
            prev = width
        self.seg_head = Conv2d(dec[-1], k, 1)
        if cfg.use_boundary_head:
            self.boundary_head = Conv2d(dec[-1], 1, 1)
        if cfg.use_presence_head:
            self.presence_head = Linear(cb, k)

    def _up(self, x: Tensor) -> Tensor:
        if self.config.upsample == "nearest":
            return ops.upsample_nearest(x, 2)
        return ops.upsample_bilinear(x, 2)

    def check_input(self, stack: Tensor) -> None:
        cfg = self.config
        if stack.ndim != 4 or stack.shape[1] != cfg.in_slices:
            raise ShapeError(f"expected N×{cfg.in_slices}×H×W input, got {stack.shape}")
        div = 2 ** (cfg.num_stages - 1)
        h, w = stack.shape[2:]
        if h % div or w % div:
            raise ShapeError(f"spatial size {h}x{w} is not divisible by {div}")

    def forward(self, stack, z_norm=None) -> NetworkOutput:
        stack = as_tensor(stack)
        self.check_input(stack)
        cfg = self.config
        x = self.slice_fusion(stack) if cfg.use_slice_fusion else stack
        feats = self.encoder(x)
        b = self.aspp(feats[-1])
        if cfg.use_film:
            if z_norm is None:
                raise ShapeError("FiLM is enabled but no z_norm was given")
            b = self.film(b, z_norm)

        prev = b
        mains: list[Tensor] = []
        for j in range(self.n_levels):
            skip = feats[len(feats) - 2 - j]
            main = getattr(self, f"dec{j}")(self._up(prev), skip)
            prev = main
            if cfg.use_nested and j >= 1:
                prev = getattr(self, f"nest{j}")(main, self._up(mains[-1]))
            mains.append(main)

        out = NetworkOutput(seg_logits=self.seg_head(prev))
        if cfg.use_boundary_head:
            out.boundary_logits = self.boundary_head(prev)
        if cfg.use_presence_head:
            out.presence_logits = self.presence_head(ops.global_avg_pool(b))
        return out

    def encoder_modules(self) -> list[Module]:
        """Modules frozen during the first fine-tuning epochs."""
        mods: list[Module] = [self.encoder]
        if self.config.use_slice_fusion:
            mods.insert(0, self.slice_fusion)
        return mods

    def encoder_parameters(self):
        return [p for m in self.encoder_modules() for p in m.parameters()]


def build(config: SegMateConfig, seed: int = 0) -> SegMateNet:
    """Construct and initialise a network; identical seeds give identical parameters."""
    net = SegMateNet(config)
    net.assign_paths()
    net.init_parameters(seed)
    return net


def forward(net: SegMateNet, stack, z_norm=None) -> NetworkOutput:
    return net(stack, z_norm)


def checksum(arrays) -> str:
    import hashlib

    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()
