"""CT preprocessing, 2.5D slice triplets and synthetic phantoms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GenerationError
from .volume import MaskVolume, Volume

HU_MIN = -1000.0
HU_MAX = 2000.0

# Background is fat-like; organs cycle through well separated intensity bands
# (soft tissue, bone, air, contrast, dense bone, lung, ...).
BACKGROUND_HU = -120.0
ORGAN_HU = (40.0, 700.0, -800.0, 250.0, 1200.0, -450.0, 450.0, 950.0)
NOISE_HU = 20.0


def clip_normalize(hu) -> np.ndarray:
    """Clamp to [-1000, 2000] HU and rescale linearly onto [0, 1]."""
    hu = np.asarray(hu, dtype=np.float32)
    return ((np.clip(hu, HU_MIN, HU_MAX) - HU_MIN) / np.float32(HU_MAX - HU_MIN)).astype(np.float32)


def interp_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Linear interpolation weights (out × in) with half-pixel centres."""
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for o in range(out_size):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        w1 = src - i0
        mat[o, i0] += 1.0 - w1
        mat[o, i1] += w1
    return mat


def resize_slice(image, target: tuple[int, int], kind: str = "image") -> np.ndarray:
    """Bilinear resize for images, nearest-neighbour for label masks."""
    img = np.asarray(image)
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be at least 1x1, got {target}")
    h, w = img.shape
    if kind == "mask":
        rows = np.minimum((np.arange(th) * h) // th, h - 1)
        cols = np.minimum((np.arange(tw) * w) // tw, w - 1)
        return img[rows[:, None], cols[None, :]]
    if kind != "image":
        raise ValueError(f"kind must be 'image' or 'mask', got {kind!r}")
    if (h, w) == (th, tw):
        return img.astype(np.float32, copy=True)
    out = interp_matrix(h, th) @ img.astype(np.float64) @ interp_matrix(w, tw).T
    return out.astype(np.float32)


def z_norm(t: int, depth: int, mode: str = "index") -> float:
    """Relative slice position in [0, 1].

    ``index``: t / (Z − 1), so the first and last slices sit at 0 and 1.
    ``physical``: slice centre over the full extent, (t + ½) / Z.
    """
    if not 0 <= t < depth:
        raise IndexError(f"slice {t} outside volume of depth {depth}")
    if mode == "index":
        return 0.0 if depth == 1 else t / (depth - 1)
    if mode == "physical":
        return (t + 0.5) / depth
    raise ValueError(f"unknown z_norm mode {mode!r}")


@dataclass
class SliceSample:
    stack: np.ndarray  # 3×H×W in [0, 1]
    target: np.ndarray | None  # H×W labels
    z_norm: float
    index: int = 0


def make_triplet(vol: Volume, t: int, mask: MaskVolume | None = None, mode: str = "index") -> SliceSample:
    """Stack slices (t−1, t, t+1), repeating the edge slice past either end."""
    depth = vol.shape[0]
    if not 0 <= t < depth:
        raise IndexError(f"slice {t} outside volume of depth {depth}")
    idx = [max(t - 1, 0), t, min(t + 1, depth - 1)]
    stack = clip_normalize(vol.voxels[idx])
    target = None if mask is None else mask.labels[t].copy()
    return SliceSample(stack, target, z_norm(t, depth, mode), t)


def volume_slices(vol: Volume, mask: MaskVolume | None = None, size: tuple[int, int] | None = None,
                  mode: str = "index"):
    """All triplets of a volume as arrays: stacks (Z,3,H,W), labels (Z,H,W) or None, z (Z,)."""
    samples = [make_triplet(vol, t, mask, mode) for t in range(vol.shape[0])]
    stacks = np.stack([s.stack for s in samples])
    labels = None if mask is None else np.stack([s.target for s in samples])
    if size is not None and tuple(size) != stacks.shape[2:]:
        stacks = np.stack([[resize_slice(ch, size, "image") for ch in st] for st in stacks])
        if labels is not None:
            labels = np.stack([resize_slice(lab, size, "mask") for lab in labels])
    zs = np.array([s.z_norm for s in samples], dtype=np.float32)
    return stacks.astype(np.float32), labels, zs


def ellipsoid_mask(shape, center, radii) -> np.ndarray:
    """Voxel centres with Σ((p − c)/r)² ≤ 1."""
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    cz, cy, cx = center
    rz, ry, rx = radii
    return ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _dilate6(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    out[:, :, 1:] |= mask[:, :, :-1]
    out[:, :, :-1] |= mask[:, :, 1:]
    return out


@dataclass
class PhantomSpec:
    """Randomised ellipsoid parameters (in voxels) recorded for each organ."""

    label: int
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    hu: float


def phantom_generate(seed: int, n_volumes: int, grid=(24, 48, 48), num_classes: int = 4,
                     spacing=(1.0, 1.0, 1.0), max_tries: int = 200, return_specs: bool = False):
    """Synthetic CT volumes with K−1 disjoint ellipsoidal organs.

    Each organ gets its own HU band; a one-voxel gap separates organs.  The
    output is a deterministic function of ``seed``.
    """
    if num_classes < 2:
        raise GenerationError("need at least one organ class (num_classes >= 2)")
    z, h, w = grid
    if min(grid) < 3:
        raise GenerationError(f"grid {tuple(grid)} too small for ellipsoids; every axis needs >= 3 voxels")
    out = []
    for v in range(n_volumes):
        rng = np.random.default_rng([seed, v])
        labels = np.zeros(grid, dtype=np.uint8)
        occupied = np.zeros(grid, dtype=bool)
        specs = []
        for k in range(1, num_classes):
            for _ in range(max_tries):
                # radii never exceed half the axis so the centre range is non-empty
                rz = min(rng.uniform(2.5, max(3.0, z / 4)), (z - 1) / 2)
                ry = min(rng.uniform(4.0, max(4.5, h / 5)), (h - 1) / 2)
                rx = min(rng.uniform(4.0, max(4.5, w / 5)), (w - 1) / 2)
                cz = rng.uniform(rz, z - 1 - rz)
                cy = rng.uniform(ry, h - 1 - ry)
                cx = rng.uniform(rx, w - 1 - rx)
                m = ellipsoid_mask(grid, (cz, cy, cx), (rz, ry, rx))
                if m.any() and not (_dilate6(m) & occupied).any():
                    break
            else:
                raise GenerationError(f"volume {v}: could not place organ {k} after {max_tries} tries")
            labels[m] = k
            occupied |= m
            specs.append(PhantomSpec(k, (cz, cy, cx), (rz, ry, rx), ORGAN_HU[(k - 1) % len(ORGAN_HU)]))
        hu = np.full(grid, BACKGROUND_HU)
        for s in specs:
            hu[labels == s.label] = s.hu
        hu += rng.normal(0.0, NOISE_HU, grid)
        voxels = np.clip(np.rint(hu), -32768, 32767).astype(np.int16)
        pid = f"phantom-{seed}-{v:04d}"
        item = (Volume(voxels, spacing, pid), MaskVolume(labels, num_classes, spacing, pid))
        out.append(item + (specs,) if return_specs else item)
    return out
