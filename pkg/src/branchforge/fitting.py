"""Log-log power-law fitting used by the decay reports."""

from __future__ import annotations

import numpy as np


def fit_power_law(t, y):
    """Least-squares slope of log y against log t.

    Returns (slope, log_amplitude, residual) where residual is the RMS of the
    log-space misfit. Nonpositive samples are rejected: decay measurements
    feeding this are sups of norms and must be positive.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (t > 0) & (y > 0) & np.isfinite(y)
    t, y = t[keep], y[keep]
    if t.size < 2:
        return float("nan"), float("nan"), float("inf")
    lt = np.log(t)
    ly = np.log(y)
    a = np.vstack([lt, np.ones_like(lt)]).T
    coef, *_ = np.linalg.lstsq(a, ly, rcond=None)
    slope, amp = float(coef[0]), float(coef[1])
    resid = float(np.sqrt(np.mean((a @ coef - ly) ** 2)))
    return slope, amp, resid


def fit_convergence_order(h, err):
    """Order p from err ~ C h^p; thin wrapper kept separate for intent."""
    p, _, resid = fit_power_law(h, err)
    return p, resid
