"""Discrimination, calibration, bootstrap aggregation, and t-tests.

AUROC uses the Mann-Whitney formulation (ties get half credit) computed
from average ranks. ECE uses equal-width probability bins. Bootstrap
confidence intervals are percentile intervals over replicate values.
Significance testing is Welch's unequal-variance t-test with
Welch-Satterthwaite degrees of freedom; two-sided p-values come from the
regularized incomplete beta function evaluated by continued fraction.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DivergenceError

ALPHA = 0.05


@dataclass
class EvalResult:
    metric: str
    mean: float
    ci_low: float
    ci_high: float
    replicates: np.ndarray


@dataclass(frozen=True)
class TestResult:
    t: float
    p: float

    @property
    def significant(self) -> bool:
        return self.p < ALPHA


def auroc(scores, labels) -> float:
    """(wins + 0.5 * ties) / (n_pos * n_neg), via average ranks."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    neg = labels == 0
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUROC undefined: needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j < scores.size and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0  # average 1-based rank
        i = j
    numer = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(numer / (n_pos * n_neg))


def ece(probs, labels, bins: int = 10) -> float:
    """Sum over non-empty equal-width bins of (n_b/n) * |accuracy - confidence|."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if probs.size == 0:
        raise DataError("ECE undefined on empty input")
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    if probs.min() < 0 or probs.max() > 1:
        raise DataError("probabilities must lie in [0, 1]")
    idx = np.minimum((probs * bins).astype(int), bins - 1)
    total = 0.0
    for b in range(bins):
        mask = idx == b
        n_b = int(mask.sum())
        if n_b == 0:
            continue
        acc = labels[mask].mean()
        conf = probs[mask].mean()
        total += (n_b / probs.size) * abs(acc - conf)
    return float(total)


_METRICS = {"auroc": auroc, "ece": ece}


def _derive_seed(seed: int, *parts) -> int:
    text = "/".join([str(seed)] + [str(p) for p in parts])
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "big")


def bootstrap_eval(metric: str, probs, labels, reps: int = 50, seed: int = 0,
                   max_redraws: int = 100, metric_kwargs: dict | None = None) -> EvalResult:
    """Resample rows with replacement reps times and evaluate the metric.

    Replicates where the metric is undefined (e.g. a single-class AUROC
    resample) are redrawn, up to max_redraws attempts each.
    """
    if metric not in _METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    fn = _METRICS[metric]
    kwargs = metric_kwargs or {}
    fn(probs, labels, **kwargs)  # must be defined on the full sample
    n = probs.size
    values = np.empty(reps)
    for i in range(reps):
        for attempt in range(max_redraws + 1):
            rng = np.random.default_rng(_derive_seed(seed, i, attempt))
            idx = rng.integers(0, n, size=n)
            try:
                values[i] = fn(probs[idx], labels[idx], **kwargs)
                break
            except DataError:
                continue
        else:
            raise DivergenceError(
                f"bootstrap replicate {i} undefined after {max_redraws} redraws")
    lo, hi = np.percentile(values, [2.5, 97.5])
    return EvalResult(metric, float(values.mean()), float(lo), float(hi), values)


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (Lentz)."""
    max_iter = 300
    eps = 3e-16
    fpmin = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise DivergenceError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    front = math.exp(math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                     + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_test(a, b) -> TestResult:
    """Welch's two-sided unequal-variance t-test between two samples."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise DataError("t-test needs at least 2 values per sample")
    va = a.var(ddof=1)
    vb = b.var(ddof=1)
    mean_diff = a.mean() - b.mean()
    se2 = va / a.size + vb / b.size
    if se2 == 0.0:
        if mean_diff == 0.0:
            return TestResult(0.0, 1.0)
        return TestResult(math.copysign(math.inf, mean_diff), 0.0)
    t = mean_diff / math.sqrt(se2)
    df = se2 ** 2 / ((va / a.size) ** 2 / (a.size - 1) + (vb / b.size) ** 2 / (b.size - 1))
    p = betainc_regularized(df / 2.0, 0.5, df / (df + t * t))
    return TestResult(float(t), float(min(max(p, 0.0), 1.0)))
