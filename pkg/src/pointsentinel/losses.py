"""Training objectives for the three detection heads.

Map losses accept a single h×w map or an N×h×w batch; batch losses are the
mean of the per-sample losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BCE_EPS = 1e-7


@dataclass
class LossValue:
    scalar: Tensor
    diagnostics: dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return self.scalar.item()


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), False
    if x.data.ndim != 3:
        raise ValueError(f"expected h×w or N×h×w map, got shape {x.shape}")
    return x, True


def _target_batch(target, shape) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == 2:
        t = t[None]
    if t.shape != tuple(shape):
        raise ValueError(f"target shape {t.shape} does not match map shape {tuple(shape)}")
    return t


def _shifted(logits: Tensor) -> Tensor:
    """Logits minus their per-sample spatial max, held constant for the gradient."""
    n, h, w = logits.shape
    m = logits.data.reshape(n, -1).max(axis=1)
    offset = np.broadcast_to(m[:, None, None], logits.shape)
    return ad.sub(logits, Tensor(offset))


def _log_softmax(logits: Tensor) -> Tensor:
    z = _shifted(logits)
    lse = ad.log(ad.sum(ad.exp(z), axis=(1, 2), keepdims=True))
    return ad.sub(z, _expand(lse, logits.shape))


def _expand(t: Tensor, shape) -> Tensor:
    """Broadcast an N×1×1 node to N×h×w with a summing backward."""
    data = np.broadcast_to(t.data, shape).copy()

    def fn(g):
        t._accumulate(g.sum(axis=(1, 2), keepdims=True))

    out = Tensor(data, _parents=(t,), op="expand")
    if out.requires_grad:
        out._backward = fn
    return out


def spatial_softmax(logits: Tensor) -> Tensor:
    """Softmax jointly over both spatial axes (max-subtracted)."""
    x, batched = _as_batch(logits)
    z = _shifted(x)
    e = ad.exp(z)
    s = _expand(ad.sum(e, axis=(1, 2), keepdims=True), x.shape)
    p = ad.div(e, s)
    return p if batched else ad.reshape(p, logits.shape)


def spatial_softmax_nll(logits: Tensor, target) -> LossValue:
    """``-log softmax`` at the one-hot target cell, scaled by 1/(h·w)."""
    x, _ = _as_batch(logits)
    t = _target_batch(target, x.shape)
    n, h, w = x.shape
    positives = t.reshape(n, -1).sum(axis=1)
    if not np.all(positives == 1) or not np.all((t == 0) | (t == 1)):
        raise ValueError("spatial_softmax_nll needs exactly one positive cell per map")
    logp = _log_softmax(x)
    picked = ad.sum(ad.mul(logp, Tensor(t)))
    loss = ad.mul(picked, -1.0 / (n * h * w))
    return LossValue(loss, {"target_prob": float(np.exp(logp.data[t == 1]).mean())})


def balanced_bce_loss(sigmoid_map: Tensor, target) -> LossValue:
    """Pixel-wise BCE with equal total weight on the positive and negative cells."""
    p, _ = _as_batch(sigmoid_map)
    t = _target_batch(target, p.shape)
    n = p.shape[0]
    n_pos = t.reshape(n, -1).sum(axis=1)
    n_neg = t[0].size - n_pos
    if np.any(n_pos == 0) or np.any(n_neg == 0):
        raise ValueError("balanced_bce_loss needs at least one positive and one negative cell")
    wpos = (0.5 / n_pos)[:, None, None] * t
    wneg = (0.5 / n_neg)[:, None, None] * (1.0 - t)
    pc = ad.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    pos_term = ad.sum(ad.mul(ad.log(pc), Tensor(wpos)))
    neg_term = ad.sum(ad.mul(ad.log(ad.sub(1.0, pc)), Tensor(wneg)))
    loss = ad.mul(ad.add(pos_term, neg_term), -1.0 / n)
    total = loss.item()
    share = float(-pos_term.item() / n / total) if total > 0 else 0.5
    return LossValue(loss, {"positive_share": share})


def bce_from_logits(logits: Tensor, target) -> LossValue:
    """Balanced BCE applied to ``sigmoid(logits)``."""
    return balanced_bce_loss(ad.sigmoid(logits), target)


def mse_point_loss(pred: Tensor, target) -> LossValue:
    """Half the squared distance between normalized points; batch = mean."""
    t = np.asarray(target, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("mse_point_loss target must lie in [0, 1]^2")
    batched = pred.data.ndim == 2
    tb = t.reshape(-1, 2) if batched else t.reshape(2)
    if tb.shape != pred.shape:
        raise ValueError(f"target shape {tb.shape} does not match prediction {pred.shape}")
    sq = ad.sum(ad.square(ad.sub(pred, Tensor(tb))))
    n = pred.shape[0] if batched else 1
    return LossValue(ad.mul(sq, 0.5 / n))
