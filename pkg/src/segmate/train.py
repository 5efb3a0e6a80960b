"""AdamW, plateau scheduling, training, fine-tuning, inference and evaluation."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from .data import resize_slice, volume_slices
from .errors import ConfigError, DataError, TrainingDiverged
from .losses import LossWeights, class_weights_from_frequency, sobel_edges_batch, total_loss
from .metrics import CaseReport, PredictionVolume, evaluate_case, reconstruct_volume
from .model import SegMateConfig, SegMateNet, build, checksum
from .tensor import backward, no_grad
from .volume import MaskVolume, Volume

log = logging.getLogger("segmate.train")


# -- optimiser ---------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One in-place AdamW update with decoupled weight decay and bias correction."""
    if state.m.shape != param.shape or grad.shape != param.shape:
        raise ValueError(f"state/grad shapes {state.m.shape}/{grad.shape} do not match param {param.shape}")
    state.step += 1
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1**state.step)
    v_hat = state.v / (1 - beta2**state.step)
    param -= (lr * weight_decay) * param
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


class AdamW:
    def __init__(self, params, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = [AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params]

    def step(self, frozen: set[int] = frozenset()) -> None:
        """Update every parameter with a gradient; ids in ``frozen`` are left untouched."""
        for p, st in zip(self.params, self.state):
            if id(p) in frozen:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adamw_step(p.data, g, st, self.lr, *self.betas, self.eps, self.weight_decay)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` validations without improvement.

    Higher metric values are better; an improvement must exceed ``min_delta``.
    """

    def __init__(self, factor: float = 0.5, patience: int = 5, min_delta: float = 1e-4):
        if not 0 < factor < 1:
            raise ConfigError("factor", "must lie in (0, 1)")
        if patience < 1:
            raise ConfigError("patience", "must be >= 1")
        self.factor, self.patience, self.min_delta = factor, patience, min_delta
        self.best = -math.inf
        self.bad = 0
        self.multiplier = 1.0
        self.reductions = 0

    def step(self, metric: float) -> float:
        if metric > self.best + self.min_delta:
            self.best = metric
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.multiplier *= self.factor
                self.reductions += 1
                self.bad = 0
        return self.multiplier


def plateau_scheduler(history: Sequence[float], factor: float = 0.5, patience: int = 5,
                      min_delta: float = 1e-4) -> float:
    """Learning-rate multiplier after feeding ``history`` through a fresh scheduler."""
    s = PlateauScheduler(factor, patience, min_delta)
    for v in history:
        s.step(v)
    return s.multiplier


# -- configuration -----------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-4
    val_fraction: float = 0.1
    auto_class_weights: bool = True
    z_mode: str = "index"
    checkpoint_dir: str | None = None
    model: SegMateConfig = field(default_factory=SegMateConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> "TrainConfig":
        if not self.lr >= 0:
            raise ConfigError("lr", "must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor", "must lie in (0, 1)")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction", "must lie in [0, 1)")
        self.model.validate()
        self.loss.validate(self.model.num_classes)
        return self


@dataclass
class FineTuneConfig:
    base_checkpoint: str | None = None
    epochs: int = 25
    frozen_epochs: int = 5
    lr: float = 5e-6
    weight_decay: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    val_fraction: float = 0.1
    freeze_bn: bool = True
    z_mode: str = "index"
    checkpoint_dir: str | None = None
    loss: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> "FineTuneConfig":
        if not 0 <= self.frozen_epochs <= self.epochs:
            raise ConfigError("frozen_epochs", "must lie in [0, epochs]")
        if not self.lr >= 0:
            raise ConfigError("lr", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        self.loss.validate()
        return self


def _split_fields(cls, flat: dict) -> tuple[dict, dict]:
    names = {f.name for f in dataclasses.fields(cls)}
    own = {k: v for k, v in flat.items() if k in names}
    rest = {k: v for k, v in flat.items() if k not in names}
    return own, rest


def loss_weights_from_dict(d: dict) -> LossWeights:
    kw = dict(d)
    if kw.get("per_class_weights") is not None:
        kw["per_class_weights"] = tuple(kw["per_class_weights"])
    return LossWeights(**kw)


def config_from_flat(flat: dict, cls=TrainConfig):
    """Build a config from one flat dict mixing run, model and loss fields."""
    own, rest = _split_fields(cls, {k: v for k, v in flat.items() if k not in ("model", "loss")})
    loss_kw, rest = _split_fields(LossWeights, rest)
    loss_kw.update(flat.get("loss", {}))
    own["loss"] = loss_weights_from_dict(loss_kw)
    if cls is TrainConfig:
        model_kw, rest = _split_fields(SegMateConfig, rest)
        model_kw.update(flat.get("model", {}))
        preset = model_kw.pop("preset", None) or rest.pop("preset", "segmate")
        if preset not in ("segmate", "vanilla"):
            raise ConfigError("preset", f"unknown preset {preset!r}")
        base = SegMateConfig.vanilla() if preset == "vanilla" else SegMateConfig.segmate()
        own["model"] = SegMateConfig.from_dict({**base.to_dict(), **model_kw})
    if rest:
        raise ConfigError(sorted(rest)[0], "unknown config field")
    return cls(**own)


def config_to_flat(cfg) -> dict:
    d = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, SegMateConfig):
            d.update(v.to_dict())
        elif isinstance(v, LossWeights):
            d.update({k: list(x) if isinstance(x, tuple) else x for k, x in dataclasses.asdict(v).items()})
        else:
            d[f.name] = v
    return d


# -- data --------------------------------------------------------------------

Dataset = Sequence[tuple[Volume, MaskVolume]]


@dataclass
class SliceSet:
    stacks: np.ndarray  # (S,3,H,W)
    labels: np.ndarray  # (S,H,W)
    z: np.ndarray  # (S,)
    edges: np.ndarray  # (S,1,H,W)

    def __len__(self) -> int:
        return len(self.z)


def build_slices(dataset: Dataset, size, mode: str = "index") -> SliceSet:
    """All training triplets, ordered by (volume, slice)."""
    if not dataset:
        raise DataError("dataset is empty")
    stacks, labels, zs = [], [], []
    for vol, mask in dataset:
        s, l, z = volume_slices(vol, mask, size, mode)
        stacks.append(s)
        labels.append(l)
        zs.append(z)
    lab = np.concatenate(labels)
    return SliceSet(np.concatenate(stacks), lab, np.concatenate(zs), sobel_edges_batch(lab))


def split_dataset(dataset: Dataset, val_fraction: float) -> tuple[list, list]:
    """Last ``round(n·val_fraction)`` volumes validate; at least one trains."""
    n = len(dataset)
    n_val = min(int(round(n * val_fraction)), n - 1) if n > 1 else 0
    return list(dataset[: n - n_val]), list(dataset[n - n_val :])


# -- logging -----------------------------------------------------------------


def format_record(rec: dict) -> str:
    def fmt(v):
        if isinstance(v, float):
            return repr(v)
        return str(v)

    return " ".join(f"{k}={fmt(v)}" for k, v in rec.items())


@dataclass
class TrainResult:
    net: SegMateNet
    log: list[dict]
    best_val_dice: float
    best_epoch: int
    checkpoint_path: str | None = None

    def epoch_records(self) -> list[dict]:
        return [r for r in self.log if r["kind"] == "epoch"]


# -- core loop ---------------------------------------------------------------


def _loop(net: SegMateNet, train_set: Dataset, val_set: Dataset, *, epochs: int, lr: float, weight_decay: float,
          batch_size: int, seed: int, loss_w: LossWeights, z_mode: str, scheduler: PlateauScheduler | None,
          frozen_epochs: int = 0, freeze_bn: bool = True, checkpoint_dir: str | None = None, meta: dict,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    cfg = net.config
    slices = build_slices(train_set, cfg.input_size, z_mode)
    opt = AdamW(net.parameters(), lr, weight_decay)
    frozen_ids = {id(p) for p in net.encoder_parameters()}
    records: list[dict] = []
    best = (-math.inf, -1, None)
    step = 0
    n = len(slices)

    for epoch in range(epochs):
        frozen = epoch < frozen_epochs
        net.train()
        if frozen and freeze_bn:
            for m in net.encoder_modules():
                m.eval()
        opt.lr = lr * (scheduler.multiplier if scheduler else 1.0)
        order = np.random.default_rng([seed, epoch]).permutation(n)
        sums = {"loss": 0.0, "seg": 0.0, "bdy": 0.0, "prs": 0.0}
        n_batches = 0
        for b0 in range(0, n, batch_size):
            idx = order[b0 : b0 + batch_size]
            net.zero_grad()
            out = net(slices.stacks[idx], slices.z[idx])
            br = total_loss(out, slices.labels[idx], loss_w, slices.edges[idx])
            value = br.total.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    + format_record({"loss": value, **br.components}))
            backward(br.total)
            opt.step(frozen_ids if frozen else frozenset())
            rec = {"kind": "step", "epoch": epoch, "step": step, "loss": value, **br.components,
                   "lr": opt.lr}
            records.append(rec)
            log.debug(format_record(rec))
            sums["loss"] += value
            for k in ("seg", "bdy", "prs"):
                sums[k] += br.components[k]
            n_batches += 1
            step += 1

        val = validate(net, val_set, z_mode) if val_set else math.nan
        mult = scheduler.step(val) if scheduler and val_set else 1.0
        rec = {"kind": "epoch", "epoch": epoch, "loss": sums["loss"] / max(n_batches, 1),
               **{k: sums[k] / max(n_batches, 1) for k in ("seg", "bdy", "prs")},
               "val_dice": val, "lr": opt.lr, "next_lr": lr * mult, "frozen": frozen,
               "encoder_checksum": checksum(p.data for p in net.encoder_parameters())[:16]}
        records.append(rec)
        log.info(format_record(rec))
        if on_epoch:
            on_epoch(rec)
        score = val if val_set else -rec["loss"]
        if score > best[0]:
            best = (score, epoch, net.state_dict())

    path = None
    if best[2] is not None:
        net.load_state_dict(best[2])
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
        path = os.path.join(checkpoint_dir, "best.smck")
        ckpt.save_model(path, net, {**meta, "best_epoch": best[1]})
        with open(os.path.join(checkpoint_dir, "train.log"), "w") as fh:
            fh.writelines(format_record(r) + "\n" for r in records)
    return TrainResult(net, records, best[0] if val_set else math.nan, best[1], path)


def train(config: TrainConfig, dataset: Dataset, on_epoch=None) -> TrainResult:
    """Train from scratch; the best validation-Dice weights are kept.

    Determinism: initialisation, the per-epoch shuffle and the batch
    reduction order depend only on ``config.seed``.
    """
    config.validate()
    train_set, val_set = split_dataset(dataset, config.val_fraction)
    loss_w = config.loss
    if config.auto_class_weights and loss_w.per_class_weights is None:
        cw = class_weights_from_frequency([m.labels for _, m in train_set], config.model.num_classes)
        loss_w = dataclasses.replace(loss_w, per_class_weights=cw)
    net = build(config.model, config.seed)
    sched = PlateauScheduler(config.plateau_factor, config.plateau_patience, config.plateau_min_delta)
    meta = {"stage": "train", "seed": config.seed, "class_weights": list(loss_w.per_class_weights or [])}
    return _loop(net, train_set, val_set, epochs=config.epochs, lr=config.lr, weight_decay=config.weight_decay,
                 batch_size=config.batch_size, seed=config.seed, loss_w=loss_w, z_mode=config.z_mode,
                 scheduler=sched, checkpoint_dir=config.checkpoint_dir, meta=meta, on_epoch=on_epoch)


def fine_tune(config: FineTuneConfig, dataset: Dataset, net: SegMateNet | None = None, on_epoch=None) -> TrainResult:
    """Continue training a checkpoint with the encoder frozen for ``frozen_epochs``.

    While frozen, encoder and SliceFusion parameters get neither gradient
    steps nor weight decay, and with ``freeze_bn`` their batch statistics
    are not updated either.
    """
    config.validate()
    if net is None:
        if config.base_checkpoint is None:
            raise ConfigError("base_checkpoint", "a base checkpoint or network is required")
        net, base_meta = ckpt.load_model(config.base_checkpoint)
    train_set, val_set = split_dataset(dataset, config.val_fraction)
    loss_w = config.loss
    if loss_w.per_class_weights is None:
        cw = class_weights_from_frequency([m.labels for _, m in train_set], net.config.num_classes)
        loss_w = dataclasses.replace(loss_w, per_class_weights=cw)
    meta = {"stage": "finetune", "seed": config.seed, "frozen_epochs": config.frozen_epochs}
    return _loop(net, train_set, val_set, epochs=config.epochs, lr=config.lr, weight_decay=config.weight_decay,
                 batch_size=config.batch_size, seed=config.seed, loss_w=loss_w, z_mode=config.z_mode,
                 scheduler=None, frozen_epochs=config.frozen_epochs, freeze_bn=config.freeze_bn,
                 checkpoint_dir=config.checkpoint_dir, meta=meta, on_epoch=on_epoch)


# -- inference & evaluation --------------------------------------------------


def _resize_logits(logits: np.ndarray, size) -> np.ndarray:
    return np.stack([resize_slice(ch, size, "image") for ch in logits])


def predict_logits(net: SegMateNet, vol: Volume, z_mode: str = "index", batch_size: int = 8):
    """Per-slice seg logits (resampled to the volume grid) and presence logits."""
    cfg = net.config
    stacks, _, zs = volume_slices(vol, None, cfg.input_size, z_mode)
    seg, prs = [], []
    was = net.training
    net.eval()
    try:
        with no_grad():
            for b0 in range(0, len(zs), batch_size):
                out = net(stacks[b0 : b0 + batch_size], zs[b0 : b0 + batch_size])
                seg.extend(out.seg_logits.data)
                if out.presence_logits is not None:
                    prs.extend(out.presence_logits.data)
    finally:
        net.train(was)
    grid = vol.shape[1:]
    if tuple(cfg.input_size) != tuple(grid):
        seg = [_resize_logits(s, grid) for s in seg]
    return seg, (prs or None)


def infer(net: SegMateNet, vol: Volume, gate_threshold: float | None = None, z_mode: str = "index",
          batch_size: int = 8) -> PredictionVolume:
    """Segment a volume slice by slice in ascending z and rebuild the 3D label grid."""
    seg, prs = predict_logits(net, vol, z_mode, batch_size)
    if gate_threshold is not None and prs is None:
        raise ConfigError("gate_threshold", "network has no presence head")
    return reconstruct_volume(seg, prs, gate_threshold, vol.spacing)


def validate(net: SegMateNet, val_set: Dataset, z_mode: str = "index") -> float:
    """Mean over volumes of the mean organ 3D Dice."""
    from .metrics import dice_3d

    scores = []
    for vol, mask in val_set:
        pred = infer(net, vol, z_mode=z_mode)
        scores.append(float(np.mean([dice_3d(pred, mask, k) for k in range(1, mask.num_classes)])))
    return float(np.mean(scores))


def evaluate(net: SegMateNet, dataset: Dataset, class_names=None, gate_threshold=None,
             z_mode: str = "index") -> list[CaseReport]:
    return [evaluate_case(infer(net, v, gate_threshold, z_mode), m, class_names, v.spacing) for v, m in dataset]
