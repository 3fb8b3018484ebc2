import numpy as np
import pytest

from backend.errors import InsufficientDataError
from backend.orders import extrapolate_limit, fit_order, order_table, regression

DELTAS = [0.08, 0.057, 0.04, 0.028, 0.02, 0.014, 0.01]


# ── fit_order ─────────────────────────────────────────────────────────────

def test_fit_order_recovers_power():
    d = np.array(DELTAS)
    assert fit_order(d, 3.0 * d**2.5) == pytest.approx(2.5, abs=1e-10)


def test_fit_order_uses_smallest_deltas():
    """A pre-asymptotic bump at large δ must not affect the fit."""
    d = np.array(DELTAS)
    e = d**3
    e[:2] *= 50.0
    assert fit_order(d, e) == pytest.approx(3.0, abs=1e-10)


def test_fit_order_is_order_independent():
    d = np.array(DELTAS)
    e = d**2 * np.abs(np.log(d))
    assert fit_order(d[::-1], e[::-1]) == pytest.approx(fit_order(d, e))


def test_fit_order_exact_agreement_is_infinite():
    assert fit_order([0.1, 0.05, 0.025], [0.0, 0.0, 0.0]) == float("inf")


def test_fit_order_needs_two_points():
    with pytest.raises(InsufficientDataError):
        fit_order([0.1], [1.0])


# ── order_table ───────────────────────────────────────────────────────────

def test_order_table_pairwise():
    d = np.array([0.01, 0.04, 0.02])
    rates = order_table(d, d**2)
    assert rates == pytest.approx([2.0, 2.0])


# ── extrapolate_limit / regression ────────────────────────────────────────

def test_extrapolate_limit_linear():
    d = np.array(DELTAS)
    assert extrapolate_limit(d, 3.0 + 5.0 * d) == pytest.approx(3.0, abs=1e-12)


def test_regression_recovers_coefficients():
    d = np.array(DELTAS)
    y = 2.0 * np.log(d) - 7.0
    a, b = regression([np.log(d), np.ones_like(d)], y)
    assert a == pytest.approx(2.0)
    assert b == pytest.approx(-7.0)


def test_regression_underdetermined():
    with pytest.raises(InsufficientDataError):
        regression([[1.0], [2.0]], [3.0])
