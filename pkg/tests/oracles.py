"""Slow, obviously-correct reference implementations used as test oracles."""

import numpy as np


def pair_count_auc(pos, neg):
    """Mann-Whitney AUC by exhaustive pair comparison."""
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def trapezoid_precision_auc(errors, delta_max, n=10_000):
    """Normalized area under the fraction-within-threshold curve by the trapezoid rule."""
    e = np.sort(np.asarray(errors, dtype=np.float64))
    t = np.linspace(0.0, delta_max, n + 1)
    frac = np.searchsorted(e, t, side="right") / e.size
    return float(np.sum((frac[1:] + frac[:-1]) * np.diff(t)) / 2 / delta_max)


def _auc_matrix(scores, labels):
    """Row-wise AUC of a (k, n) score matrix by pair counting."""
    pos, neg = scores[:, labels == 1], scores[:, labels == 0]
    gt = (pos[:, :, None] > neg[:, None, :]).mean(axis=(1, 2))
    eq = (pos[:, :, None] == neg[:, None, :]).mean(axis=(1, 2))
    return gt + 0.5 * eq


def permutation_auc_test(a, b, labels, n_perm=10_000, seed=0):
    """Paired permutation p-value for AUC(a) - AUC(b).

    Scores are replaced by within-model ranks, then each case's pair of ranks
    is swapped between the models with probability 1/2.
    """
    labels = np.asarray(labels)
    ra = np.argsort(np.argsort(a, kind="stable"), kind="stable").astype(float)
    rb = np.argsort(np.argsort(b, kind="stable"), kind="stable").astype(float)
    # ties keep their rank order from a stable sort; average them instead
    for r, s in ((ra, np.asarray(a)), (rb, np.asarray(b))):
        for v in np.unique(s):
            idx = s == v
            r[idx] = r[idx].mean()
    observed = _auc_matrix(ra[None], labels)[0] - _auc_matrix(rb[None], labels)[0]
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = 1000
    for start in range(0, n_perm, chunk):
        k = min(chunk, n_perm - start)
        swap = rng.random((k, len(labels))) < 0.5
        pa = np.where(swap, rb, ra)
        pb = np.where(swap, ra, rb)
        diff = _auc_matrix(pa, labels) - _auc_matrix(pb, labels)
        hits += int(np.sum(np.abs(diff) >= abs(observed) - 1e-12))
    return (hits + 1) / (n_perm + 1)


def paired_score_instance(rng, n_pos=30, n_neg=30):
    """Random paired scores: model A with a random signal strength, model B
    either equally informative or uninformative."""
    labels = np.r_[np.ones(n_pos, int), np.zeros(n_neg, int)]
    strength_a = rng.uniform(0.0, 2.5)
    strength_b = strength_a if rng.random() < 0.5 else rng.uniform(0.0, 0.5)
    shared = rng.normal(size=labels.size)
    a = strength_a * labels + 0.6 * shared + 0.8 * rng.normal(size=labels.size)
    b = strength_b * labels + 0.6 * shared + 0.8 * rng.normal(size=labels.size)
    return a, b, labels
