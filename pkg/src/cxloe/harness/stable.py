"""Stable-rate detection on a piecewise-constant rate trace.

A window is stable when the rate's standard deviation over it stays below a
fraction of its mean. The first stable rate is the mean of the earliest such
window starting at or after the first accepted PFC; the final stable rate is
the mean of the latest such window in the run.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

WINDOW_NS = 100_000
GRID_NS = 1_000
REL_STD = 0.02


def sample(trace, end_ns: int, grid_ns: int = GRID_NS) -> tuple[np.ndarray, np.ndarray]:
    """Rate in Gbps on a regular grid from a ``(t, phase, cr_bps, tr_bps)`` trace."""
    times = np.array([t for t, *_ in trace], dtype=np.int64)
    rates = np.array([cr for _, _, cr, _ in trace], dtype=np.float64) / 1e9
    grid = np.arange(0, end_ns + 1, grid_ns, dtype=np.int64)
    idx = np.searchsorted(times, grid, side="right") - 1
    return grid, rates[np.clip(idx, 0, None)]


def stable_windows(values: np.ndarray, width: int, rel_std: float = REL_STD):
    """Mean per window start and a mask of stable windows."""
    n = len(values) - width + 1
    if n <= 0:
        return np.empty(0), np.zeros(0, dtype=bool)
    c1 = np.concatenate(([0.0], np.cumsum(values)))
    c2 = np.concatenate(([0.0], np.cumsum(values * values)))
    s1 = c1[width:] - c1[:-width]
    s2 = c2[width:] - c2[:-width]
    mean = s1 / width
    var = np.maximum(s2 / width - mean * mean, 0.0)
    stable = np.sqrt(var) < rel_std * mean
    return mean, stable


def stable_rates(trace, end_ns: int, first_pfc_at: Optional[int] = None,
                 window_ns: int = WINDOW_NS, grid_ns: int = GRID_NS,
                 rel_std: float = REL_STD) -> tuple[Optional[float], Optional[float]]:
    """``(first_stable_gbps, final_stable_gbps)``; None where no window qualifies."""
    grid, values = sample(trace, end_ns, grid_ns)
    width = window_ns // grid_ns
    mean, stable = stable_windows(values, width, rel_std)
    if not stable.any():
        return None, None
    starts = grid[: len(mean)]
    after = stable & (starts >= (first_pfc_at or 0))
    first = float(mean[np.argmax(after)]) if after.any() else None
    final = float(mean[np.nonzero(stable)[0][-1]])
    return first, final
