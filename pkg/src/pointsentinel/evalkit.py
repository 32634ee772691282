"""Localization metrics, precision plots, bootstrap CIs, ROC AUC and DeLong tests."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_DELTA_RELATIVE = 0.15
DEFAULT_DELTA_MM = 50.0


@dataclass(frozen=True)
class LocalizationError:
    case_id: str
    relative: float
    absolute_mm: float | None = None


@dataclass(frozen=True)
class PrecisionCurve:
    delta_max: float
    thresholds: np.ndarray
    fractions: np.ndarray
    auc: float


@dataclass(frozen=True)
class BootstrapCI:
    point: float
    lo: float
    hi: float
    n_resamples: int
    seed: int


@dataclass(frozen=True)
class RocResult:
    auc: float
    variance: float
    n_pos: int
    n_neg: int


@dataclass(frozen=True)
class DelongResult:
    auc_a: float
    auc_b: float
    z: float
    p_two_sided: float


def localization_error(pred, record) -> LocalizationError:
    """Euclidean error relative to the image diagonal, plus mm when spacing is known."""
    if record.point is None:
        raise ValueError(f"{record.case_id}: no ground-truth point")
    gx, gy = record.point
    px = float(pred.x if hasattr(pred, "x") else pred[0])
    py = float(pred.y if hasattr(pred, "y") else pred[1])
    dist = math.hypot(px - gx, py - gy)
    h, w = record.image_dims
    absolute = None if record.pixel_spacing_mm is None else dist * record.pixel_spacing_mm
    return LocalizationError(record.case_id, dist / math.hypot(h, w), absolute)


def _errors(errors) -> np.ndarray:
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("need at least one error value")
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValueError("errors must be finite and non-negative")
    return e


def precision_auc(errors, delta_max: float) -> float:
    """Exact area under the normalized step curve on [0, delta_max]."""
    e = _errors(errors)
    if delta_max <= 0:
        raise ValueError("delta_max must be positive")
    return float(np.maximum(0.0, delta_max - e).sum() / (e.size * delta_max))


def precision_curve(errors, delta_max: float = DEFAULT_DELTA_RELATIVE, n_thresholds: int = 101) -> PrecisionCurve:
    e = _errors(errors)
    if delta_max <= 0:
        raise ValueError("delta_max must be positive")
    if n_thresholds < 2:
        raise ValueError("n_thresholds must be >= 2")
    t = np.linspace(0.0, delta_max, n_thresholds)
    s = np.sort(e)
    fractions = np.searchsorted(s, t, side="right") / e.size
    return PrecisionCurve(float(delta_max), t, fractions, precision_auc(e, delta_max))


def _resample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), index]))


def bootstrap_auc_ci(errors, delta_max: float = DEFAULT_DELTA_RELATIVE, n_resamples: int = 1000,
                     alpha: float = 0.05, seed: int = 0) -> BootstrapCI:
    """Percentile CI of the precision AUC under case-level resampling.

    Resample ``b`` draws its indices from an RNG seeded by (seed, b), so the
    interval does not depend on evaluation order.
    """
    e = _errors(errors)
    if n_resamples < 100:
        raise ValueError("n_resamples must be >= 100")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    n = e.size
    clipped = np.maximum(0.0, delta_max - e) / delta_max
    stats = np.empty(n_resamples)
    for b in range(n_resamples):
        idx = _resample_rng(seed, b).integers(0, n, size=n)
        stats[b] = clipped[idx].mean()
    point = float(clipped.mean())
    lo, hi = np.quantile(stats, [alpha / 2, 1 - alpha / 2])
    # percentile bounds need not bracket a skewed point estimate
    return BootstrapCI(point, float(min(lo, point)), float(max(hi, point)), n_resamples, seed)


def error_stats(errors_mm) -> dict[str, float]:
    """Mean, median, max, min, population std and linearly interpolated quartiles."""
    e = _errors(errors_mm)
    q1, med, q3 = np.quantile(e, [0.25, 0.5, 0.75])
    return {
        "mean": float(e.mean()),
        "median": float(med),
        "max": float(e.max()),
        "min": float(e.min()),
        "std": float(e.std()),
        "q1": float(q1),
        "q3": float(q3),
    }


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties replaced by their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    n = len(x)
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j < n and sx[j] == sx[i]:
            j += 1
        ranks[i:j] = 0.5 * (i + j - 1) + 1.0
        i = j
    out = np.empty(n)
    out[order] = ranks
    return out


def _structural_components(pos: np.ndarray, neg: np.ndarray):
    """AUC and DeLong placement values V10 (per positive) and V01 (per negative)."""
    m, n = len(pos), len(neg)
    tz = midranks(np.concatenate([pos, neg]))
    tx, ty = midranks(pos), midranks(neg)
    v10 = (tz[:m] - tx) / n
    v01 = 1.0 - (tz[m:] - ty) / m
    auc = (tz[:m].sum() - m * (m + 1) / 2.0) / (m * n)
    return auc, v10, v01


def _class_scores(pos_scores, neg_scores) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("roc_auc needs at least one positive and one negative score")
    return pos, neg


def roc_auc(pos_scores, neg_scores) -> RocResult:
    """Mann-Whitney AUC (ties count half) with DeLong's variance estimate."""
    pos, neg = _class_scores(pos_scores, neg_scores)
    auc, v10, v01 = _structural_components(pos, neg)
    m, n = len(pos), len(neg)
    s10 = v10.var(ddof=1) if m > 1 else 0.0
    s01 = v01.var(ddof=1) if n > 1 else 0.0
    return RocResult(float(auc), float(s10 / m + s01 / n), m, n)


def _normal_two_sided(z: float) -> float:
    return math.erfc(abs(z) / math.sqrt(2.0))


def delong_covariance(scores_a, scores_b, labels) -> tuple[np.ndarray, np.ndarray]:
    """AUCs and 2×2 covariance of two paired score vectors."""
    a = np.asarray(scores_a, dtype=np.float64).ravel()
    b = np.asarray(scores_b, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if not (len(a) == len(b) == len(y)):
        raise ValueError("scores and labels must have equal length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    pos_mask = y == 1
    m, n = int(pos_mask.sum()), int((~pos_mask).sum())
    if m == 0 or n == 0:
        raise ValueError("labels must contain both classes")
    aucs, v10s, v01s = [], [], []
    for s in (a, b):
        auc, v10, v01 = _structural_components(s[pos_mask], s[~pos_mask])
        aucs.append(auc)
        v10s.append(v10)
        v01s.append(v01)
    s10 = np.cov(np.vstack(v10s)) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(np.vstack(v01s)) if n > 1 else np.zeros((2, 2))
    return np.array(aucs), s10 / m + s01 / n


def delong_test(model_a_scores, model_b_scores, labels) -> DelongResult:
    """Paired DeLong comparison of two ROC AUCs on the same cases."""
    aucs, cov = delong_covariance(model_a_scores, model_b_scores, labels)
    diff = aucs[0] - aucs[1]
    var = cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1]
    if var <= 1e-15:
        if abs(diff) <= 1e-12:
            return DelongResult(float(aucs[0]), float(aucs[1]), 0.0, 1.0)
        # zero sampling variance (e.g. both models separate perfectly, in opposite directions)
        return DelongResult(float(aucs[0]), float(aucs[1]), math.copysign(math.inf, diff), 0.0)
    z = diff / math.sqrt(var)
    return DelongResult(float(aucs[0]), float(aucs[1]), float(z), _normal_two_sided(z))


def mean_point_offset(set_a: Sequence, set_b: Sequence, image_dims) -> float:
    """Distance between the two sets' mean points, relative to the image diagonal."""
    a = np.asarray(set_a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(set_b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both point sets must be non-empty")
    h, w = image_dims
    return float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)) / math.hypot(h, w))
