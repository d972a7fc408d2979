"""Accuracy, ROC/AUROC, percentile bootstrap and Welch's t-test."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class NoDiscriminationPossible(ValueError):
    """AUROC is undefined when only one class is present."""

    code = "NO_DISCRIMINATION_POSSIBLE"


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if p.size == 0:
        raise ValueError("accuracy of an empty set")
    if p.size != y.size:
        raise ValueError(f"{p.size} predictions vs {y.size} labels")
    return float(np.mean((p >= 0.5) == (y == 1)))


def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.size != y.size:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise NoDiscriminationPossible("labels contain a single class")
    return s, pos, n_pos, n_neg


def auroc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg) with mid-ranks, so ties count one half."""
    s, pos, n_pos, n_neg = _scores_labels(scores, labels)
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def area(self) -> float:
        """Trapezoidal area under the curve."""
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))


def roc_curve(scores, labels) -> RocCurve:
    """ROC points at every distinct score, highest threshold first, from (0, 0) to (1, 1)."""
    s, pos, n_pos, n_neg = _scores_labels(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, pos_sorted = s[order], pos[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s_sorted)), s.size - 1]
    tp = np.cumsum(pos_sorted)[last_of_run]
    fp = (last_of_run + 1) - tp
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    thresholds = np.r_[np.inf, s_sorted[last_of_run]]
    return RocCurve(fpr, tpr, thresholds)


def mean_auroc(scores, labels=None) -> float:
    """Unweighted mean AUROC over tasks.

    Accepts either two (N, K) arrays or a sequence of (scores, labels) pairs.
    """
    if labels is not None:
        s = np.asarray(scores)
        y = np.asarray(labels)
        if s.shape != y.shape or s.ndim != 2:
            raise ValueError(f"expected matching (N, K) arrays, got {s.shape} and {y.shape}")
        tasks = [(s[:, k], y[:, k]) for k in range(s.shape[1])]
    else:
        tasks = list(scores)
    if not tasks:
        raise ValueError("no tasks")
    values = []
    for k, (s_k, y_k) in enumerate(tasks):
        try:
            values.append(auroc(s_k, y_k))
        except NoDiscriminationPossible as exc:
            raise NoDiscriminationPossible(f"task {k}: {exc}") from None
    return float(np.mean(values))


def client_average(per_client_metric) -> float:
    values = np.asarray(per_client_metric, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no clients to average")
    return float(values.mean())


# --------------------------------------------------------------------------
# bootstrap


@dataclass(frozen=True)
class ConfidenceInterval:
    point: float
    low: float
    high: float
    level: float = 0.95

    def __post_init__(self):
        if not self.low <= self.point <= self.high:
            raise ValueError(f"interval ({self.low}, {self.high}) does not contain {self.point}")

    def contains(self, value: float) -> bool:
        return self.low <= value <= self.high


def bootstrap_ci(data, statistic=None, n_resamples: int = 1000, level: float = 0.95,
                 seed: int = 0) -> ConfidenceInterval:
    """Percentile bootstrap over rows of ``data``, resampled with replacement.

    ``statistic`` maps a resampled array to a float; the default is the mean,
    which is evaluated for all resamples at once. Resamples on which the
    statistic returns NaN are dropped. The bounds are widened to
    include the point estimate when the resample distribution is lopsided.
    """
    data = np.asarray(data)
    n = len(data)
    if n < 2:
        raise ValueError("bootstrap needs at least 2 observations")
    if n_resamples < 100:
        raise ValueError("use at least 100 resamples")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_resamples, n))
    if statistic is None:
        point = float(data.mean())
        stats = data[idx].reshape(n_resamples, -1).mean(axis=1)
    else:
        point = float(statistic(data))
        stats = np.array([statistic(data[row]) for row in idx], dtype=np.float64)
        # resamples where the statistic is undefined (e.g. AUROC with one class) come back as NaN
        stats = stats[np.isfinite(stats)]
        if stats.size < n_resamples // 2:
            raise ValueError(f"statistic undefined on {n_resamples - stats.size} of {n_resamples} resamples")
    alpha = (1 - level) / 2
    low, high = np.quantile(stats, [alpha, 1 - alpha])
    return ConfidenceInterval(point, min(float(low), point), max(float(high), point), level)


# --------------------------------------------------------------------------
# Welch's t-test


def _betacf(a: float, b: float, x: float, max_iter: int = 20000, eps: float = 1e-16) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_sf_two_tailed(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


def t_test_two_sample(a, b) -> tuple[float, float]:
    """Welch's unequal-variance t-test; returns (t, two-tailed p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    ma, mb = a.mean(), b.mean()
    sa, sb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = sa + sb
    diff = ma - mb
    if se2 == 0.0:
        if diff == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    t = float(diff / math.sqrt(se2))
    df = se2 ** 2 / (sa ** 2 / (a.size - 1) + sb ** 2 / (b.size - 1))
    return t, float(t_sf_two_tailed(t, df))
