"""Survival evaluation metrics.

Time-dependent concordance (Antolini), IPCW Brier score and its integral,
Kaplan-Meier curves, mean reciprocal rank, and a one-sided Welch test.
All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

G_FLOOR = 1e-4


@dataclass(frozen=True)
class KMCurve:
    """Right-continuous product-limit step function."""

    knots: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        pos = np.searchsorted(self.knots, t, side="right")
        return np.concatenate(([1.0], self.survival))[pos]

    def left(self, t) -> np.ndarray:
        """Left limit S(t-)."""
        t = np.asarray(t, dtype=np.float64)
        pos = np.searchsorted(self.knots, t, side="left")
        return np.concatenate(([1.0], self.survival))[pos]


def kaplan_meier(times, events) -> KMCurve:
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events)
    if times.size == 0:
        raise ValueError("kaplan_meier needs at least one observation")
    if np.any(times < 0):
        raise ValueError("times must be >= 0")
    if not np.all((events == 0) | (events == 1)):
        raise ValueError("event flags must be 0 or 1")
    uniq, inverse = np.unique(times, return_inverse=True)
    deaths = np.bincount(inverse, weights=events, minlength=len(uniq))
    counts = np.bincount(inverse, minlength=len(uniq))
    at_risk = len(times) - np.concatenate(([0], np.cumsum(counts)[:-1]))
    has_event = deaths > 0
    factors = 1.0 - deaths[has_event] / at_risk[has_event]
    return KMCurve(uniq[has_event], np.cumprod(factors), at_risk[has_event])


def censoring_survival(times, events) -> KMCurve:
    """KM estimate G of the censoring distribution (flags flipped)."""
    return kaplan_meier(times, 1 - np.asarray(events))


def td_c_index(cdf, times, events, grid=None) -> float | None:
    """Antolini's time-dependent concordance.

    ``cdf[i, c]`` is F(grid[c] | x_i).  For every pair with d_i = 1 and
    t_i < t_j the pair is concordant when F(t_i | x_i) > F(t_i | x_j); ties in
    F count one half.  Without ``grid`` the columns are taken to be ``times``
    in subject order.  Returns None when no pair is admissible.
    """
    cdf = np.asarray(cdf, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events)
    n = len(times)
    if grid is None:
        grid = times
    grid = np.asarray(grid, dtype=np.float64)
    if cdf.shape != (n, len(grid)):
        raise ValueError(f"cdf shape {cdf.shape} != ({n}, {len(grid)})")

    ev_times = np.unique(times[events == 1])
    if ev_times.size == 0:
        return None
    col_of = {}
    for c, g in enumerate(grid):
        col_of.setdefault(g, c)
    missing = [t for t in ev_times if t not in col_of]
    if missing:
        raise ValueError(f"grid lacks event times, e.g. {missing[0]!r}")

    concordant = 0.0
    pairs = 0
    for t in ev_times:
        col = cdf[:, col_of[t]]
        later = np.sort(col[times > t])
        if later.size == 0:
            continue
        anchors = col[(times == t) & (events == 1)]
        below = np.searchsorted(later, anchors, side="left")
        upto = np.searchsorted(later, anchors, side="right")
        concordant += float(below.sum()) + 0.5 * float((upto - below).sum())
        pairs += anchors.size * later.size
    if pairs == 0:
        return None
    return concordant / pairs


def brier_score(surv_at_t, times, events, censor_km: KMCurve, t: float) -> float:
    """IPCW Brier score at time ``t`` given S(t | x_i) for every subject.

    Weights use the left limit of G (probability of remaining uncensored up
    to, and including, the weighting time), floored at 1e-4.  Subjects
    censored before ``t`` contribute nothing.
    """
    if t < 0:
        raise ValueError("evaluation time must be >= 0")
    s = np.asarray(surv_at_t, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events)
    g_i = np.maximum(censor_km.left(times), G_FLOOR)
    g_t = max(float(censor_km.left(t)), G_FLOOR)
    died = (times < t) & (events == 1)
    alive = times >= t
    terms = np.where(died, s**2 / g_i, 0.0) + np.where(alive, (1.0 - s) ** 2 / g_t, 0.0)
    return float(terms.mean())


def ibs_grid(t_max: float, size: int = 100) -> np.ndarray:
    if t_max <= 0:
        raise ValueError("t_max must be > 0")
    if size < 2:
        raise ValueError("grid size must be >= 2")
    return np.linspace(0.0, t_max, size)


def brier_curve(surv, grid, times, events, censor_km: KMCurve) -> np.ndarray:
    surv = np.asarray(surv, dtype=np.float64)
    return np.array([brier_score(surv[:, c], times, events, censor_km, g) for c, g in enumerate(grid)])


def ibs(surv, times, events, censor_km: KMCurve, t_max: float, grid_size: int | None = None) -> float:
    """Trapezoidal time-average of the Brier score over [0, t_max].

    ``surv[i, c]`` must be S(grid[c] | x_i) on ``ibs_grid(t_max, grid_size)``;
    the grid size defaults to the number of columns.
    """
    surv = np.asarray(surv, dtype=np.float64)
    size = surv.shape[1] if grid_size is None else grid_size
    if surv.shape[1] != size:
        raise ValueError(f"survival matrix has {surv.shape[1]} columns, grid has {size}")
    grid = ibs_grid(t_max, size)
    bs = brier_curve(surv, grid, times, events, censor_km)
    return float(np.trapezoid(bs, grid) / t_max)


def mrr(ranks) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("mrr of an empty rank list")
    if np.any(ranks < 1) or np.any(ranks != np.round(ranks)):
        raise ValueError("ranks must be integers >= 1")
    return float(np.mean(1.0 / ranks))


def min_ranks(scores, higher_is_better: bool = True) -> np.ndarray:
    """Competition ranks: equal scores share the best (smallest) rank."""
    s = np.asarray(scores, dtype=np.float64)
    key = -s if higher_is_better else s
    return stats.rankdata(key, method="min").astype(int)


def one_sided_p_value(candidate, baseline) -> float:
    """Welch test of H0: mean(baseline) >= mean(candidate).

    Small values mean the candidate's mean is larger.
    """
    a = np.asarray(candidate, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            return 0.5
        return 0.0 if diff > 0 else 1.0
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return float(stats.t.sf(diff / np.sqrt(se2), df))


def harrell_c_index(risk, times, events) -> float | None:
    """Time-independent concordance of a scalar risk score (higher = earlier event)."""
    risk = np.asarray(risk, dtype=np.float64)
    return td_c_index(np.repeat(risk[:, None], len(times), axis=1), times, events)


def evaluate_cdf(cdf_fn, times, events, grid_size: int = 100) -> dict:
    """C-index and IBS for a predictor given as ``cdf_fn(grid) -> F matrix``.

    The C-index columns are the distinct event times; the IBS grid spans
    [0, max observed time] and G is estimated from the same data.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events)
    ev = np.unique(times[events == 1])
    c = td_c_index(cdf_fn(ev), times, events, ev) if ev.size else None
    t_max = float(times.max())
    grid = ibs_grid(t_max, grid_size)
    surv = 1.0 - np.asarray(cdf_fn(grid))
    return {"c_index": c, "ibs": ibs(surv, times, events, censoring_survival(times, events), t_max)}
