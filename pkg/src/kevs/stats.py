"""One-sided Wilcoxon signed-rank test for paired metric samples.

Zero differences are dropped, absolute differences are ranked with average
ranks on ties, and the statistic is the positive-rank sum W+. The exact
p-value P(W >= W+) under sign-flip symmetry is computed by dynamic
programming over the rank multiset (identical to enumerating all 2^n sign
assignments); larger samples fall back to the normal approximation with tie
and continuity corrections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as spstats

from .errors import ValidationError

EXACT_LIMIT = 20  # auto mode enumerates exactly up to this many pairs

_MIN_PAIRS = 5


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # W+, the positive-rank sum
    p_value: float
    n: int  # pairs remaining after zero-difference removal
    method: str  # "exact" or "approx"


def _exact_upper_tail(ranks: np.ndarray, w_plus: float) -> float:
    # doubling turns average ranks (.5 steps) into integers for the DP
    r2 = np.rint(2.0 * ranks).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    w2 = int(np.rint(2.0 * w_plus))
    n_ge = int(counts[w2:].sum())
    return n_ge / float(2 ** len(r2))


def _approx_upper_tail(d_abs: np.ndarray, ranks: np.ndarray, w_plus: float) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(d_abs, return_counts=True)
    var -= float(((tie_counts ** 3 - tie_counts) / 48.0).sum())
    if var <= 0:
        raise ValidationError("all differences tied; normal approximation undefined")
    z = (w_plus - mean - 0.5) / np.sqrt(var)
    return float(spstats.norm.sf(z))


def wilcoxon_one_sided(x, y, method: str = "auto") -> WilcoxonResult:
    """Test the alternative hypothesis that paired sample ``x`` exceeds ``y``.

    ``method`` is ``"auto"`` (exact up to 20 pairs, else approximate),
    ``"exact"``, or ``"approx"``.
    """
    if method not in ("auto", "exact", "approx"):
        raise ValidationError(f"unknown method {method!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("paired samples must be 1D arrays of equal length")

    d = x - y
    d = d[d != 0.0]
    n = d.size
    if n < _MIN_PAIRS:
        raise ValidationError(
            f"fewer than {_MIN_PAIRS} nonzero differences (got {n}); test undefined"
        )

    d_abs = np.abs(d)
    ranks = spstats.rankdata(d_abs)
    w_plus = float(ranks[d > 0].sum())

    use_exact = method == "exact" or (method == "auto" and n <= EXACT_LIMIT)
    if use_exact:
        if n > 62:  # 2^n must stay exactly representable for the count ratio
            raise ValidationError(f"exact method infeasible for n={n}")
        p = _exact_upper_tail(ranks, w_plus)
        return WilcoxonResult(w_plus, p, n, "exact")
    p = _approx_upper_tail(d_abs, ranks, w_plus)
    return WilcoxonResult(w_plus, min(1.0, p), n, "approx")
