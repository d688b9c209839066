"""Short-term average rate and convergence detection."""

from __future__ import annotations

import numpy as np


def short_term_average(rates, n_r: int) -> np.ndarray:
    """Sliding mean over the last ``n_r`` values; the prefix uses what exists."""
    if n_r < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(rates, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - n_r, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def detect_convergence(avg, rel_tol: float = 0.01, hold: int = 1000,
                       start: int = 0) -> int | None:
    """Earliest ``t >= start`` with ``|avg[t + j] - avg[t]| <= rel_tol * |avg[t]|`` for ``j = 0..hold``.

    Returns ``None`` when no slot qualifies, including series shorter than
    ``hold + 1``. Run loops pass ``start = N_r - 1`` so that only
    full-window averages count.
    """
    a = np.asarray(avg, dtype=float)
    if a.size == 0:
        raise ValueError("empty series")
    for t in range(start, len(a) - hold):
        w = a[t:t + hold + 1]
        tol = rel_tol * abs(a[t])
        if np.all(np.abs(w - a[t]) <= tol):
            return t
    return None


def tail_mean(rates, fraction: float = 0.25) -> float:
    """Mean of the last ``fraction`` of a trace."""
    x = np.asarray(rates, dtype=float)
    n = max(1, int(round(len(x) * fraction)))
    return float(np.mean(x[-n:]))
