"""Evaluation metrics and method-comparison statistics."""

from __future__ import annotations

import logging
import math

import numpy as np

log = logging.getLogger(__name__)

EXACT_WILCOXON_MAX_N = 25


def r_squared(y, f) -> float:
    """Coefficient of determination, ``1 - SS_res / SS_tot``."""
    y = np.asarray(y, dtype=np.float64).ravel()
    f = np.asarray(f, dtype=np.float64).ravel()
    if y.shape != f.shape:
        raise ValueError(f"length mismatch: {y.size} observations vs {f.size} predictions")
    if y.size < 2:
        raise ValueError("need at least two observations")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise ValueError("observations are constant; R^2 undefined")
    return float(1.0 - np.sum((y - f) ** 2) / ss_tot)


def average_precision(labels, scores) -> float:
    """Step-summed AP: ``sum_n (R_n - R_{n-1}) P_n`` over the ranked list.

    Items are ranked by descending score; tied scores keep their input order.
    """
    labels = np.asarray(labels).ravel().astype(bool)
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if labels.shape != scores.shape:
        raise ValueError("labels and scores differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    return float(np.sum(precision[hits]) / n_pos)


def mean_average_precision(labels, scores) -> float:
    """Unweighted mean of per-class AP for (N, C) arrays; classes without positives are skipped."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 2:
        raise ValueError("expected matching (N, C) label and score arrays")
    aps = []
    for c in range(labels.shape[1]):
        if not labels[:, c].any():
            log.info("class %d has no positives; skipped in mAP", c)
            continue
        aps.append(average_precision(labels[:, c], scores[:, c]))
    if not aps:
        raise ValueError("no class has a positive label")
    return float(np.mean(aps))


def relative_improvement(old: float, new: float) -> float:
    """Fraction of the gap to a perfect score that was closed (multiply by 100 for %)."""
    if old >= 1:
        raise ValueError("old metric must be < 1")
    return (new - old) / (1.0 - old)


def rank_methods(values, higher_is_better: bool = True) -> np.ndarray:
    """Rank 1 = best; ties share the mean of the ranks they cover."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValueError("need at least two methods to rank")
    key = -v if higher_is_better else v
    order = np.argsort(key, kind="stable")
    ranks = np.empty(v.size)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and key[order[j + 1]] == key[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _abs_ranks(d: np.ndarray) -> np.ndarray:
    if d.size == 1:
        return np.ones(1)
    return rank_methods(np.abs(d), higher_is_better=False)


def _exact_upper_tail(ranks2: np.ndarray, w2: int) -> float:
    """P(W+ >= w) under the sign-flip null, with doubled (integer) ranks."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in ranks2:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    n = len(ranks2)
    return float(sum(counts[w2:]) / (2 ** n))


def wilcoxon_one_sided(differences) -> float:
    """Signed-rank p-value for the alternative "differences > 0".

    Zero differences are dropped and tied |d| get mean ranks. Up to 25
    non-zero pairs the null distribution of W+ is enumerated exactly;
    beyond that a normal approximation with continuity correction is used.
    """
    d = np.asarray(differences, dtype=np.float64).ravel()
    d = d[d != 0]
    if d.size == 0:
        raise ValueError("all differences are zero")
    ranks = _abs_ranks(d)
    w_plus = float(ranks[d > 0].sum())
    n = d.size
    if n <= EXACT_WILCOXON_MAX_N:
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        return _exact_upper_tail(ranks2, int(round(2 * w_plus)))
    mean_w = n * (n + 1) / 4.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    var_w = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts ** 3 - counts) / 48.0
    z = (w_plus - mean_w - 0.5) / math.sqrt(var_w)
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def holm_bonferroni(p_values, alpha: float = 0.05):
    """Holm step-down. Returns ``(reject, adjusted)`` in input order."""
    p = np.asarray(p_values, dtype=np.float64).ravel()
    m = p.size
    if m == 0:
        raise ValueError("need at least one p-value")
    order = np.argsort(p, kind="stable")
    reject = np.zeros(m, dtype=bool)
    adjusted = np.empty(m)
    running = 0.0
    stopped = False
    for k, idx in enumerate(order):
        factor = m - k
        running = max(running, min(1.0, factor * p[idx]))
        adjusted[idx] = running
        if not stopped and p[idx] <= alpha / factor:
            reject[idx] = True
        else:
            stopped = True
    return reject, adjusted


def mean_and_se(values) -> tuple:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("no values")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se
