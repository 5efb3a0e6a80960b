"""Multi-task objective: segmentation, boundary and presence terms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import ops
from .tensor.core import Tensor, as_tensor

FOCAL_CLAMP = 1e-7


@dataclass
class LossWeights:
    lambda_seg: float = 1.0
    lambda_bdy: float = 0.5
    lambda_prs: float = 0.2
    lambda_dice: float = 1.0
    lambda_ce: float = 1.0
    alpha: float = 0.5
    focal_gamma: float = 2.0
    dice_eps: float = 1.0
    per_class_weights: tuple[float, ...] | None = None
    exclude_background: bool = False

    def validate(self, num_classes: int | None = None) -> "LossWeights":
        for name in ("lambda_seg", "lambda_bdy", "lambda_prs", "lambda_dice", "lambda_ce", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha", "must lie in [0, 1]")
        if self.dice_eps < 0:
            raise ConfigError("dice_eps", "must be >= 0")
        if self.per_class_weights is not None:
            if any(w <= 0 for w in self.per_class_weights):
                raise ConfigError("per_class_weights", "weights must be positive")
            if num_classes is not None and len(self.per_class_weights) != num_classes:
                raise ConfigError("per_class_weights",
                                  f"expected {num_classes} entries, got {len(self.per_class_weights)}")
        return self

    def class_weights(self, num_classes: int) -> np.ndarray:
        if self.per_class_weights is None:
            return np.ones(num_classes, dtype=np.float32)
        return np.asarray(self.per_class_weights, dtype=np.float32)


def class_weights_from_frequency(label_arrays, num_classes: int) -> tuple[float, ...]:
    """Inverse square-root pixel frequency, normalised to mean 1.

    Classes never seen count as a single pixel so their weight stays finite.
    """
    counts = np.zeros(num_classes, dtype=np.float64)
    for labels in label_arrays:
        counts += np.bincount(np.asarray(labels).reshape(-1), minlength=num_classes)[:num_classes]
    freq = np.maximum(counts, 1.0) / max(counts.sum(), 1.0)
    w = 1.0 / np.sqrt(freq)
    w /= w.mean()
    return tuple(float(v) for v in w)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N,H,W) integer labels → (N,K,H,W) indicator array."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes}), found range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None].astype(np.intp), 1, axis=1)
    return out


def dice_loss(probs: Tensor, target_onehot, eps: float = 1.0, class_weights=None) -> Tensor:
    """1 − weighted mean over classes of (2Σpt + eps)/(Σp + Σt + eps).

    Sums run over batch and space.  A class with zero weight is left out of
    the average.
    """
    target = as_tensor(target_onehot, probs)
    if probs.shape != target.shape or probs.ndim != 4:
        raise ShapeError(f"dice_loss: probs {probs.shape} vs target {target.shape}")
    k = probs.shape[1]
    w = np.ones(k, dtype=probs.dtype) if class_weights is None else np.asarray(class_weights, dtype=probs.dtype)
    if w.shape != (k,):
        raise ShapeError(f"dice_loss: {w.shape[0]} class weights for {k} classes")
    axes = (0, 2, 3)
    inter = ops.sum(probs * target, axis=axes)
    denom = ops.sum(probs, axis=axes) + ops.sum(target, axis=axes)
    dice = (inter * 2.0 + eps) / (denom + eps)
    return 1.0 - ops.sum(dice * w) / float(w.sum())


def _pixel_weights(target_onehot: np.ndarray, class_weights) -> np.ndarray | None:
    if class_weights is None:
        return None
    w = np.asarray(class_weights, dtype=target_onehot.dtype)
    return (target_onehot * w[None, :, None, None]).sum(axis=1)


def _weighted_mean(per_pixel: Tensor, pix_w: np.ndarray | None) -> Tensor:
    if pix_w is None:
        return ops.mean(per_pixel)
    return ops.sum(per_pixel * pix_w) / float(pix_w.sum(dtype=np.float64))


def focal_loss(probs: Tensor, target_onehot, gamma: float = 2.0, class_weights=None) -> Tensor:
    """Class-weighted mean of −(1 − p_t)^γ · log p_t, with p_t clamped to [1e-7, 1]."""
    target = as_tensor(target_onehot, probs)
    if probs.shape != target.shape:
        raise ShapeError(f"focal_loss: probs {probs.shape} vs target {target.shape}")
    pt = ops.clamp(ops.sum(probs * target, axis=1), FOCAL_CLAMP, 1.0)
    nll = -ops.log(pt)
    per_pixel = nll if gamma == 0 else ops.power(1.0 - pt, gamma) * nll
    return _weighted_mean(per_pixel, _pixel_weights(target.data, class_weights))


def cross_entropy(logits: Tensor, target_labels, class_weights=None) -> Tensor:
    """Class-weighted mean negative log-softmax probability of the true label."""
    k = logits.shape[1]
    onehot = one_hot(target_labels, k, logits.dtype)
    if onehot.shape != logits.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {np.shape(target_labels)}")
    nll = -ops.sum(ops.log_softmax(logits, axis=1) * onehot, axis=1)
    return _weighted_mean(nll, _pixel_weights(onehot, class_weights))


@dataclass
class SegTerms:
    dice: Tensor
    focal: Tensor
    ce: Tensor
    total: Tensor


def seg_loss_terms(seg_logits: Tensor, target_labels, w: LossWeights) -> SegTerms:
    k = seg_logits.shape[1]
    cw = w.class_weights(k)
    dice_w = cw.copy()
    if w.exclude_background:
        dice_w[0] = 0.0
    probs = ops.softmax(seg_logits, axis=1)
    onehot = one_hot(target_labels, k, seg_logits.dtype)
    dice = dice_loss(probs, onehot, w.dice_eps, dice_w)
    focal = focal_loss(probs, onehot, w.focal_gamma, cw)
    ce = cross_entropy(seg_logits, target_labels, cw)
    total = (dice * w.alpha + focal * (1.0 - w.alpha)) * w.lambda_dice + ce * w.lambda_ce
    return SegTerms(dice, focal, ce, total)


def seg_loss(seg_logits: Tensor, target_labels, w: LossWeights) -> Tensor:
    """λ_Dice·(α·Dice + (1−α)·focal) + λ_CE·CE."""
    return seg_loss_terms(seg_logits, target_labels, w).total


SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.int64)
SOBEL_Y = SOBEL_X.T


def sobel_edges(mask_labels) -> np.ndarray:
    """Binary edge map (1×H×W) of a label image.

    Each class indicator is filtered with the 3×3 Sobel pair under replicate
    padding; a pixel is an edge when any class has a non-zero response.
    """
    labels = np.asarray(mask_labels)
    if labels.ndim != 2:
        raise ShapeError(f"sobel_edges expects an H×W label image, got {labels.shape}")
    h, w = labels.shape
    edges = np.zeros((h, w), dtype=bool)
    for cls in np.unique(labels):
        ind = np.pad((labels == cls).astype(np.int64), 1, mode="edge")
        gx = np.zeros((h, w), dtype=np.int64)
        gy = np.zeros((h, w), dtype=np.int64)
        for u in range(3):
            for v in range(3):
                win = ind[u : u + h, v : v + w]
                gx += SOBEL_X[u, v] * win
                gy += SOBEL_Y[u, v] * win
        edges |= (gx != 0) | (gy != 0)
    return edges[None].astype(np.float32)


def sobel_edges_batch(labels) -> np.ndarray:
    labels = np.asarray(labels)
    return np.stack([sobel_edges(lab) for lab in labels])


def boundary_loss(boundary_logits: Tensor, gt_edges, eps: float = 1.0) -> Tensor:
    """Binary Dice loss between sigmoid(logits) and the edge target."""
    target = as_tensor(gt_edges, boundary_logits)
    if boundary_logits.shape != target.shape:
        raise ShapeError(f"boundary_loss: logits {boundary_logits.shape} vs edges {target.shape}")
    p = ops.sigmoid(boundary_logits)
    inter = ops.sum(p * target)
    return 1.0 - (inter * 2.0 + eps) / (ops.sum(p) + ops.sum(target) + eps)


def presence_targets(target_labels, num_classes: int) -> np.ndarray:
    """y[n, k] = 1 iff class k occupies at least one pixel of slice n."""
    labels = np.asarray(target_labels)
    n = labels.shape[0]
    flat = labels.reshape(n, -1)
    if flat.size and (flat.min() < 0 or flat.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((n, num_classes), dtype=np.float32)
    for i in range(n):
        out[i] = np.bincount(flat[i], minlength=num_classes)[:num_classes] > 0
    return out


def presence_loss(presence_logits: Tensor, y) -> Tensor:
    """Mean binary cross-entropy over all N·K entries (log-sum-exp stable)."""
    return ops.mean(ops.bce_with_logits(presence_logits, y))


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)


def total_loss(outputs, target_labels, w: LossWeights, gt_edges=None) -> LossBreakdown:
    """λ_seg·seg + λ_bdy·bdy + λ_prs·prs over whichever heads the network has."""
    seg = seg_loss(outputs.seg_logits, target_labels, w)
    terms: list[tuple[str, float, Tensor]] = [("seg", w.lambda_seg, seg)]
    if outputs.boundary_logits is not None:
        if gt_edges is None:
            gt_edges = sobel_edges_batch(target_labels)
        terms.append(("bdy", w.lambda_bdy, boundary_loss(outputs.boundary_logits, gt_edges, w.dice_eps)))
    if outputs.presence_logits is not None:
        y = presence_targets(target_labels, outputs.presence_logits.shape[1])
        terms.append(("prs", w.lambda_prs, presence_loss(outputs.presence_logits, y)))
    total = terms[0][2] * terms[0][1]
    for _, lam, t in terms[1:]:
        total = total + t * lam
    comps = {"seg": 0.0, "bdy": 0.0, "prs": 0.0}
    comps.update({name: t.item() for name, _, t in terms})
    lams = {"seg": w.lambda_seg, "bdy": w.lambda_bdy, "prs": w.lambda_prs}
    return LossBreakdown(total, comps, lams)
