from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

Spacing = tuple[float, float, float]


def _check_spacing(spacing) -> Spacing:
    # stored as f32 on disk; snap now so a file round-trip is the identity
    sp = tuple(float(np.float32(s)) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise DataError(f"spacing must be three positive finite values, got {spacing}")
    return sp


@dataclass
class Volume:
    """CT grid in Hounsfield units, Z×H×W, with voxel spacing (sz, sy, sx) in mm."""

    voxels: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    patient_id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.int16)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise DataError(f"volume must be a non-empty Z×H×W grid, got {self.voxels.shape}")
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class MaskVolume:
    """Integer label grid aligned with a :class:`Volume`."""

    labels: np.ndarray
    num_classes: int
    spacing: Spacing = (1.0, 1.0, 1.0)
    patient_id: str = ""

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise DataError(f"mask must be a non-empty Z×H×W grid, got {labels.shape}")
        if not 1 <= self.num_classes <= 256:
            raise DataError(f"num_classes must lie in [1, 256], got {self.num_classes}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        self.labels = labels.astype(np.uint8)
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape
