"""Volume reconstruction and per-organ 3D Dice / HD95."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, ShapeError
from .volume import MaskVolume


@dataclass
class PredictionVolume:
    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise DataError(f"prediction must be Z×H×W, got {self.labels.shape}")
        if not all(s > 0 for s in self.spacing):
            raise DataError(f"spacing must be positive, got {self.spacing}")


def _np(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x))


def reconstruct_volume(slice_predictions: Sequence, presence: Sequence | None = None,
                       gate_threshold: float | None = None, spacing=(1.0, 1.0, 1.0)) -> PredictionVolume:
    """Stack per-slice argmax labels (slices given in ascending z).

    With gating, organ classes whose presence probability falls below the
    threshold are relabelled as background on that slice.
    """
    if not slice_predictions:
        raise DataError("no slices to reconstruct")
    logits = [_np(s) for s in slice_predictions]
    ref = logits[0].shape
    if len(ref) != 3:
        raise DataError(f"slice logits must be K×H×W, got {ref}")
    for i, s in enumerate(logits):
        if s.shape != ref:
            raise DataError(f"slice {i} has shape {s.shape}, expected {ref}")
    labels = np.stack([s.argmax(axis=0) for s in logits]).astype(np.uint8)
    if gate_threshold is not None:
        if presence is None or len(presence) != len(logits):
            raise DataError("gating needs one presence vector per slice")
        for i, p in enumerate(presence):
            p = _np(p).astype(np.float64)
            prob = 1.0 / (1.0 + np.exp(-np.clip(p, -500, 500)))
            for k in np.nonzero(prob < gate_threshold)[0]:
                if k > 0:
                    labels[i][labels[i] == k] = 0
    return PredictionVolume(labels, tuple(spacing))


def _labels(v) -> np.ndarray:
    return np.asarray(v.labels if hasattr(v, "labels") else v)


def dice_3d(pred, gt, k: int) -> float:
    """2|P∩G| / (|P| + |G|); 1.0 when both are empty."""
    p, g = _labels(pred) == k, _labels(gt) == k
    if p.shape != g.shape:
        raise ShapeError(f"grid mismatch {p.shape} vs {g.shape}")
    sp, sg = int(p.sum()), int(g.sum())
    if sp + sg == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / (sp + sg)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-neighbour outside it (grid exterior counts as outside)."""
    m = np.pad(mask.astype(bool), 1, constant_values=False)
    interior = m[1:-1, 1:-1, 1:-1].copy()
    for ax in range(3):
        for shift in (-1, 1):
            interior &= np.roll(m, shift, axis=ax)[1:-1, 1:-1, 1:-1]
    return mask.astype(bool) & ~interior


def surface_distances(pred_mask: np.ndarray, gt_mask: np.ndarray, spacing) -> np.ndarray:
    """Pooled directed distances (mm) between the two surfaces, both directions."""
    sp = np.asarray(spacing, dtype=np.float64)
    a = np.argwhere(surface_voxels(pred_mask)) * sp
    b = np.argwhere(surface_voxels(gt_mask)) * sp
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return np.concatenate([d_ab, d_ba])


def hd95(pred, gt, k: int, spacing=None) -> float:
    """95th percentile (linear interpolation) of the pooled surface distances.

    Returns NaN when either mask is empty for class ``k``.
    """
    p, g = _labels(pred) == k, _labels(gt) == k
    if p.shape != g.shape:
        raise ShapeError(f"grid mismatch {p.shape} vs {g.shape}")
    if spacing is None:
        spacing = getattr(gt, "spacing", None) or getattr(pred, "spacing", None) or (1.0, 1.0, 1.0)
    if not p.any() or not g.any():
        return math.nan
    return float(np.percentile(surface_distances(p, g, spacing), 95))


@dataclass
class CaseReport:
    class_names: list[str]
    dice: dict[str, float]
    hd95: dict[str, float | None]
    mean_dice: float
    mean_hd95: float | None
    undefined_hd95: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dice": self.dice,
            "hd95": self.hd95,
            "mean_dice": self.mean_dice,
            "mean_hd95": self.mean_hd95,
            "undefined_hd95": self.undefined_hd95,
        }

    def to_text(self) -> str:
        lines = [f"{'organ':<16}{'dice':>10}{'hd95_mm':>12}"]
        for name in self.class_names:
            h = self.hd95[name]
            lines.append(f"{name:<16}{self.dice[name]:>10.4f}{'undefined' if h is None else f'{h:.3f}':>12}")
        mh = "undefined" if self.mean_hd95 is None else f"{self.mean_hd95:.3f}"
        lines.append(f"{'mean':<16}{self.mean_dice:>10.4f}{mh:>12}")
        if self.undefined_hd95:
            lines.append(f"hd95 undefined for {self.undefined_hd95} organ(s) (empty mask)")
        return "\n".join(lines)


def evaluate_case(pred, gt, class_names: Sequence[str] | None = None, spacing=None) -> CaseReport:
    """Per-organ Dice and HD95 for classes 1..K−1 plus their means."""
    gl = _labels(gt)
    k = getattr(gt, "num_classes", None) or int(max(gl.max(), _labels(pred).max())) + 1
    if class_names is None:
        class_names = [f"class{i}" for i in range(1, k)]
    if len(class_names) != k - 1:
        raise DataError(f"{len(class_names)} names for {k - 1} organ classes")
    dice, hd = {}, {}
    for i, name in enumerate(class_names, start=1):
        dice[name] = dice_3d(pred, gt, i)
        v = hd95(pred, gt, i, spacing)
        hd[name] = None if math.isnan(v) else v
    defined = [v for v in hd.values() if v is not None]
    return CaseReport(
        class_names=list(class_names),
        dice=dice,
        hd95=hd,
        mean_dice=float(np.mean(list(dice.values()))),
        mean_hd95=float(np.mean(defined)) if defined else None,
        undefined_hd95=len(hd) - len(defined),
    )


def as_mask(pred: PredictionVolume, num_classes: int, patient_id: str = "") -> MaskVolume:
    return MaskVolume(pred.labels, num_classes, pred.spacing, patient_id)
