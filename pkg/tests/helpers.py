"""Shared fixtures for small networks and datasets."""

import numpy as np

from segmate.data import phantom_generate
from segmate.model import SegMateConfig

TINY = dict(
    encoder_widths=(4, 8, 16),
    decoder_widths=(8, 4),
    bottleneck_width=8,
    aspp_rates=(1, 2),
    input_size=(16, 16),
    fusion_width=4,
    film_hidden=8,
    se_reduction=4,
    cbam_reduction=4,
    encoder_depth=1,
    decoder_depth=1,
)


def tiny_config(**overrides) -> SegMateConfig:
    return SegMateConfig.segmate(**{**TINY, **overrides})


def tiny_vanilla(**overrides) -> SegMateConfig:
    return SegMateConfig.vanilla(**{**TINY, **overrides})


def tiny_dataset(n=4, seed=3, grid=(6, 24, 24), k=3):
    return phantom_generate(seed, n, grid, k)


def randn(rng, *shape, scale=1.0):
    return (rng.standard_normal(shape) * scale).astype(np.float32)
