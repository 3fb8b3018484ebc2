# backend/orders.py
"""Convergence-order fits and small regressions used by every verification sweep."""

import numpy as np
from pytools.convergence import EOCRecorder

from backend.errors import InsufficientDataError

TAIL = 4


def _checked(x, y, minimum):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise InsufficientDataError(f"abscissae {x.shape} and values {y.shape} differ in shape")
    if len(x) < minimum:
        raise InsufficientDataError(f"need at least {minimum} points, got {len(x)}")
    return x, y


def fit_order(deltas, errors, tail=TAIL):
    """Least-squares slope of log|error| against log δ over the `tail` smallest δ.

    Zero errors (exact agreement) are dropped; fewer than two left → +inf.
    """
    d, e = _checked(deltas, errors, 2)
    keep = np.argsort(d)[:tail]
    rec = EOCRecorder()
    for di, ei in zip(d[keep], np.abs(e[keep])):
        if ei > 0 and np.isfinite(ei):
            rec.add_data_point(float(di), float(ei))
    if len(rec.history) < 2:
        return float("inf")
    return float(rec.order_estimate())


def order_table(deltas, errors):
    """Pairwise orders log(e_i/e_{i+1})/log(δ_i/δ_{i+1}) with δ decreasing."""
    d, e = _checked(deltas, errors, 2)
    idx = np.argsort(-d)
    d, e = d[idx], np.abs(e[idx])
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(e[:-1] / e[1:]) / np.log(d[:-1] / d[1:])


def extrapolate_limit(deltas, values, tail=TAIL):
    """Intercept at δ = 0 of a linear fit in δ over the `tail` smallest δ."""
    d, v = _checked(deltas, values, 2)
    keep = np.argsort(d)[:tail]
    slope, intercept = np.polyfit(d[keep], v[keep], 1)
    return float(intercept)


def regression(columns, target):
    """Least-squares coefficients of target ≈ Σ c_k·columns[k]."""
    A = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    y = np.asarray(target, dtype=float)
    if A.shape[0] < A.shape[1]:
        raise InsufficientDataError(f"{A.shape[0]} samples for {A.shape[1]} unknowns")
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef
