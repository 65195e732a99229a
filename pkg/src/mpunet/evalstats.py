"""Significance tests and box-whisker summaries for comparing Dice scores."""

from __future__ import annotations

import csv
import itertools
import math

import numpy as np
from scipy.special import betainc, ndtr
from scipy.stats import rankdata

from .volume import quantile

EXACT_MAX_N = 10


class StatsError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise StatsError(f"paired samples need equal lengths, got {a.size} and {b.size}")
    if a.size < 2:
        raise StatsError("need at least two pairs")
    return a, b


def t_sf_two_sided(t, df):
    """``P(|T| >= |t|)`` for Student's t via the regularised incomplete beta."""
    t = abs(float(t))
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(a, b):
    """Two-sided paired t-test on ``a - b``.

    All-zero differences give ``p = 1``; constant non-zero differences have no
    defined statistic and raise.
    """
    a, b = _pair(a, b)
    d = a - b
    n = d.size
    if np.all(d == 0):
        return 1.0
    sd = d.std(ddof=1)
    if sd == 0:
        raise StatsError("differences have zero variance but non-zero mean")
    t = d.mean() / (sd / math.sqrt(n))
    return t_sf_two_sided(t, n - 1)


def _tail_p(lower, upper):
    return float(min(1.0, 2.0 * min(lower, upper)))


def _tie_term(ranks_source):
    _, counts = np.unique(ranks_source, return_counts=True)
    return float(np.sum(counts.astype(np.float64) ** 3 - counts))


def rank_sum_null(ranks, n1):
    """Null distribution of the rank sum of a size-``n1`` group drawn from ``ranks``.

    Returns ``(sums, probabilities)``. Ranks are averaged on ties, so they are
    multiples of 1/2; counting subsets by doubled rank sum is an exact
    integer dynamic programme.
    """
    r2 = np.rint(2 * np.asarray(ranks, dtype=np.float64)).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros((n1 + 1, total + 1))
    counts[0, 0] = 1.0
    for r in r2:
        counts[1:, r:] = counts[1:, r:] + counts[:-1, :total + 1 - r]
    dist = counts[n1]
    support = np.flatnonzero(dist)
    return support / 2.0, dist[support] / dist.sum()


def signed_rank_null(ranks):
    """Null distribution of the positive-rank sum over all ``2**n`` sign patterns."""
    r2 = np.rint(2 * np.asarray(ranks, dtype=np.float64)).astype(np.int64)
    total = int(r2.sum())
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[:total + 1 - r]
        dist = dist + shifted
    support = np.flatnonzero(dist)
    return support / 2.0, dist[support] / dist.sum()


def _exact_p(stat, null):
    sums, probs = null
    lower = probs[sums <= stat + 1e-9].sum()
    upper = probs[sums >= stat - 1e-9].sum()
    return _tail_p(lower, upper)


def _rank_sum(a, b, exact):
    n1, n2 = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    w = ranks[:n1].sum()
    if exact:
        return _exact_p(w, rank_sum_null(ranks, n1))
    n = n1 + n2
    mean = n1 * (n + 1) / 2.0
    var = n1 * n2 / 12.0 * ((n + 1) - _tie_term(pooled) / (n * (n - 1)))
    if var <= 0:
        return 1.0
    z = (abs(w - mean) - 0.5) / math.sqrt(var)
    return _tail_p(ndtr(-max(z, 0.0)), 1.0)


def _signed_rank(a, b, exact):
    d = a - b
    d = d[d != 0]
    if d.size == 0:
        return 1.0
    ranks = rankdata(np.abs(d))
    w = ranks[d > 0].sum()
    if exact:
        return _exact_p(w, signed_rank_null(ranks))
    n = d.size
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - _tie_term(np.abs(d)) / 48.0
    if var <= 0:
        return 1.0
    z = (abs(w - mean) - 0.5) / math.sqrt(var)
    return _tail_p(ndtr(-max(z, 0.0)), 1.0)


def wilcoxon_test(a, b, mode="rank_sum", exact=None):
    """Two-sided Wilcoxon p-value.

    ``rank_sum`` compares ``a`` and ``b`` as independent samples (Mann-Whitney),
    ``signed_rank`` uses the paired differences. ``exact=None`` enumerates the
    null distribution when every sample has at most 10 values and otherwise
    uses the tie-corrected normal approximation with continuity correction.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if mode == "rank_sum":
        if min(a.size, b.size) < 2:
            raise StatsError("need at least two values per sample")
        if exact is None:
            exact = max(a.size, b.size) <= EXACT_MAX_N
        return _rank_sum(a, b, exact)
    if mode == "signed_rank":
        a, b = _pair(a, b)
        if exact is None:
            exact = a.size <= EXACT_MAX_N
        return _signed_rank(a, b, exact)
    raise StatsError(f"unknown mode {mode!r}; use 'rank_sum' or 'signed_rank'")


def box_stats(s):
    """Box-and-whisker summary with linear-interpolation quartiles.

    Outliers are points further than 1.5 IQR below the first or above the
    third quartile; whiskers end at the most extreme non-outlying points.
    """
    s = np.asarray(s, dtype=np.float64).ravel()
    if s.size == 0:
        raise StatsError("box_stats of an empty sample")
    p25, median, p75 = (float(quantile(s, q)) for q in (0.25, 0.5, 0.75))
    iqr = p75 - p25
    lo, hi = p25 - 1.5 * iqr, p75 + 1.5 * iqr
    inside = s[(s >= lo) & (s <= hi)]
    return {
        "n": int(s.size),
        "min": float(s.min()),
        "max": float(s.max()),
        "mean": float(s.mean()),
        "p25": p25,
        "median": median,
        "p75": p75,
        "iqr": iqr,
        "whisker_low": float(inside.min()),
        "whisker_high": float(inside.max()),
        "outliers": sorted(float(v) for v in s[(s < lo) | (s > hi)]),
    }


TESTS = {
    "t": paired_t_test,
    "rank_sum": lambda a, b: wilcoxon_test(a, b, "rank_sum"),
    "signed_rank": lambda a, b: wilcoxon_test(a, b, "signed_rank"),
}


def pvalue_matrix(samples: dict, test="t"):
    """Symmetric method-by-method p-value matrix; the diagonal is 1."""
    fn = TESTS[test]
    names = list(samples)
    m = np.ones((len(names), len(names)))
    for i, j in itertools.combinations(range(len(names)), 2):
        m[i, j] = m[j, i] = fn(samples[names[i]], samples[names[j]])
    return names, m


def write_pvalue_csv(path, names, matrix, dataset="", test="t"):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "test", "method"] + names)
        for name, row in zip(names, matrix):
            w.writerow([dataset, test, name] + [f"{p:.6g}" for p in row])
