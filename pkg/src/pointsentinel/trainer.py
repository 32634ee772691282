"""Mini-batch training for the detection heads, with resumable checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import evalkit, losses
from .ingest import SampleRecord, load_image, read_records
from .nnmodel import (
    HEAD_VARIANTS,
    BackboneConfig,
    DetectionModel,
    ModelConfig,
    encode_target,
    read_container,
    write_container,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}{': ' + detail if detail else ''}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    head_variant: str = "spatial_softmax"
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    horizontal_jitter_px: int = 0
    val_delta_max: float = evalkit.DEFAULT_DELTA_RELATIVE

    def __post_init__(self):
        if self.head_variant not in HEAD_VARIANTS:
            raise ValueError(f"unknown head variant {self.head_variant!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if isinstance(self.backbone, dict):
            object.__setattr__(self, "backbone", BackboneConfig(**self.backbone))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = {k: v for k, v in d.items() if k != "version"}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.head_variant, self.backbone)


def load_train_config(path) -> TrainConfig:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if "version" not in d:
        raise ValueError(f"{path}: missing 'version' field")
    return TrainConfig.from_dict(d)


# ---------------------------------------------------------------- optimizers


def _check_shapes(params, grads):
    for k, p in params.items():
        g = grads.get(k)
        if g is not None and np.shape(g) != np.shape(p):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)} for {k}")


def sgd_step(params: dict, grads: dict, state: dict, lr: float, momentum: float = 0.0):
    """In-place SGD (heavy-ball momentum when ``momentum`` > 0); missing grads skip."""
    _check_shapes(params, grads)
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if momentum:
            v = state.get(f"v/{k}")
            v = g.copy() if v is None else momentum * v + g
            state[f"v/{k}"] = v
            g = v
        p -= lr * g
    return params, state


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """In-place Adam with bias correction; ``state['t']`` counts steps."""
    _check_shapes(params, grads)
    t = int(state.get("t", 0)) + 1
    state["t"] = t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        m = state.get(f"m/{k}")
        v = state.get(f"v/{k}")
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state[f"m/{k}"] = m.astype(p.dtype)
        state[f"v/{k}"] = v.astype(p.dtype)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------- data


@dataclass
class Dataset:
    images: np.ndarray  # N×1×H×W float32
    records: list[SampleRecord]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def image_dims(self) -> tuple[int, int]:
        return tuple(self.images.shape[-2:])

    @classmethod
    def from_scenes(cls, scenes) -> "Dataset":
        imgs = np.stack([s.image for s in scenes]).astype(np.float32)[:, None]
        return cls(imgs, [s.record for s in scenes])

    @classmethod
    def from_csv(cls, csv_path) -> "Dataset":
        csv_path = Path(csv_path)
        recs = read_records(csv_path)
        imgs = [load_image(csv_path.parent / r.image_path) for r in recs]
        return cls(np.stack(imgs).astype(np.float32)[:, None], recs)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(self.images[idx], [self.records[i] for i in idx])


def _points(ds: Dataset) -> np.ndarray:
    pts = []
    for r in ds.records:
        if r.point is None:
            raise ValueError(f"{r.case_id}: training records need a ground-truth point")
        pts.append(r.point)
    return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


def encode_targets(points: np.ndarray, variant: str, image_dims, stride: int) -> np.ndarray:
    """Per-head training targets: normalized (x, y) or one-hot maps."""
    h, w = image_dims
    if variant == "regression":
        return points / np.array([w, h])
    return np.stack([encode_target(p, (h // stride, w // stride), stride) for p in points])


def batch_loss(model: DetectionModel, images: np.ndarray, targets: np.ndarray) -> losses.LossValue:
    out = model.forward(images)
    if model.variant == "regression":
        return losses.mse_point_loss(out, targets)
    if model.variant == "pixelwise":
        return losses.bce_from_logits(out, targets)
    return losses.spatial_softmax_nll(out, targets)


def dataset_loss(model: DetectionModel, ds: Dataset, batch_size: int = 64) -> float:
    """Mean per-sample training objective over ``ds`` without updating anything."""
    targets = encode_targets(_points(ds), model.variant, ds.image_dims, model.stride)
    total = 0.0
    for s in range(0, len(ds), batch_size):
        lv = batch_loss(model, ds.images[s : s + batch_size], targets[s : s + batch_size])
        total += lv.item() * len(targets[s : s + batch_size])
    return total / len(ds)


def relative_errors(model: DetectionModel, ds: Dataset) -> np.ndarray:
    points, _ = model.predict(ds.images)
    return np.array([evalkit.localization_error(p, r).relative for p, r in zip(points, ds.records)])


def _jitter(images: np.ndarray, points: np.ndarray, shifts: np.ndarray):
    """Shift images horizontally (edge-replicated) and move the points along."""
    out = np.empty_like(images)
    w = images.shape[-1]
    moved = points.copy()
    for i, s in enumerate(shifts):
        out[i] = images[i][..., np.clip(np.arange(w) - s, 0, w - 1)]
        moved[i, 0] = np.clip(points[i, 0] + s, 0.0, np.nextafter(w, 0))
    return out, moved


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    opt_state: dict
    epoch: int
    history: list[dict] = field(default_factory=list)
    best_params: dict[str, np.ndarray] | None = None
    best_epoch: int = -1

    def model(self, best: bool = True) -> DetectionModel:
        p = self.best_params if best and self.best_params is not None else self.params
        return DetectionModel(self.config.model_config(), p)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays: dict[str, np.ndarray] = {f"param/{k}": v for k, v in ckpt.params.items()}
    if ckpt.best_params is not None:
        arrays.update({f"best/{k}": v for k, v in ckpt.best_params.items()})
    arrays.update({f"opt/{k}": v for k, v in ckpt.opt_state.items() if isinstance(v, np.ndarray)})
    header = {
        "architecture": ckpt.config.model_config().to_dict(),
        "train_config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "best_epoch": ckpt.best_epoch,
        "history": ckpt.history,
        "opt_scalars": {k: v for k, v in ckpt.opt_state.items() if not isinstance(v, np.ndarray)},
    }
    write_container(path, header, arrays)


def load_checkpoint(path) -> Checkpoint:
    header, arrays = read_container(path)
    try:
        cfg = TrainConfig.from_dict(header["train_config"])
        params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
        best = {k[5:]: v for k, v in arrays.items() if k.startswith("best/")} or None
        opt = {k[4:]: v for k, v in arrays.items() if k.startswith("opt/")}
        opt.update(header.get("opt_scalars", {}))
        return Checkpoint(cfg, params, opt, int(header["epoch"]), list(header.get("history", [])), best, int(header.get("best_epoch", -1)))
    except (KeyError, TypeError, ValueError) as exc:
        from .nnmodel import CheckpointError

        raise CheckpointError(f"{path}: incomplete checkpoint header ({exc})") from exc


# ---------------------------------------------------------------- training


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), epoch, 7]))


def train(cfg: TrainConfig, train_set: Dataset, val_set: Dataset | None = None, *,
          resume: Checkpoint | None = None,
          on_epoch: Callable[[Checkpoint], None] | None = None) -> Checkpoint:
    """Train one head; returns a checkpoint holding the last and best-validation params.

    Shuffling and jitter draw from an RNG seeded by (seed, epoch), so a run
    resumed from an epoch checkpoint retraces the uninterrupted run exactly.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if val_set is not None and len(val_set) == 0:
        raise ValueError("empty validation set")
    if resume is not None:
        model = DetectionModel(cfg.model_config(), {k: v.copy() for k, v in resume.params.items()})
        opt_state = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in resume.opt_state.items()}
        history = list(resume.history)
        start = resume.epoch
        best_params = None if resume.best_params is None else {k: v.copy() for k, v in resume.best_params.items()}
        best_epoch = resume.best_epoch
    else:
        model = DetectionModel.create(cfg.model_config(), cfg.seed)
        opt_state, history, start, best_params, best_epoch = {}, [], 0, None, -1
    best_score = max((h["val_precision_auc"] for h in history if h.get("val_precision_auc") is not None), default=-math.inf)

    points = _points(train_set)
    targets = encode_targets(points, cfg.head_variant, train_set.image_dims, model.stride)
    params = {k: t.data for k, t in model.params.items()}
    n = len(train_set)
    ckpt = Checkpoint(cfg, params, opt_state, start, history, best_params, best_epoch)

    for epoch in range(start, cfg.epochs):
        rng = _epoch_rng(cfg.seed, epoch)
        order = rng.permutation(n)
        shifts = rng.integers(-cfg.horizontal_jitter_px, cfg.horizontal_jitter_px + 1, size=n) if cfg.horizontal_jitter_px else None
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            imgs, tg = train_set.images[idx], targets[idx]
            if shifts is not None:
                imgs, moved = _jitter(imgs, points[idx], shifts[idx])
                tg = encode_targets(moved, cfg.head_variant, train_set.image_dims, model.stride)
            lv = batch_loss(model, imgs, tg)
            value = lv.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, f"loss {value}")
            ad.backward(lv.scalar)
            grads = {k: t.grad for k, t in model.params.items()}
            if cfg.optimizer == "adam":
                adam_step(params, grads, opt_state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            else:
                sgd_step(params, grads, opt_state, cfg.learning_rate, cfg.momentum)
            for t in model.params.values():
                t.zero_grad()
            total += value * len(idx)
        for k, p in params.items():
            if not np.all(np.isfinite(p)):
                raise TrainingDiverged(epoch, f"non-finite parameter {k}")
        entry = {"epoch": epoch + 1, "train_loss": total / n, "val_precision_auc": None}
        if val_set is not None:
            score = evalkit.precision_auc(relative_errors(model, val_set), cfg.val_delta_max)
            entry["val_precision_auc"] = score
            if score > best_score:
                best_score, best_epoch = score, epoch + 1
                best_params = {k: v.copy() for k, v in params.items()}
        history.append(entry)
        log.info("%s seed=%d epoch %d loss %.6g val %s", cfg.head_variant, cfg.seed, epoch + 1,
                 entry["train_loss"], entry["val_precision_auc"])
        ckpt = Checkpoint(cfg, params, opt_state, epoch + 1, history, best_params, best_epoch)
        if on_epoch is not None:
            on_epoch(ckpt)
    return ckpt


def overfit_check(cfg: TrainConfig, subset: Dataset, epochs: int = 200, ratio: float = 0.1) -> tuple[float, float, int]:
    """Train on ``subset`` until the loss falls below ``ratio`` × initial.

    Returns (initial_loss, final_loss, epochs_used).
    """
    cfg = replace(cfg, epochs=epochs)
    model = DetectionModel.create(cfg.model_config(), cfg.seed)
    initial = dataset_loss(model, subset)
    state = {"final": initial, "epochs": 0}

    class _Done(Exception):
        pass

    def watch(ck: Checkpoint):
        loss = dataset_loss(ck.model(best=False), subset)
        state["final"], state["epochs"] = loss, ck.epoch
        if loss < ratio * initial:
            raise _Done

    try:
        train(cfg, subset, None, on_epoch=watch)
    except _Done:
        pass
    return initial, state["final"], state["epochs"]
