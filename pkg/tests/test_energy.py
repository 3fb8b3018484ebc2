import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.special import i0

from backend.ansatz import Ansatz, BubbleParams
from backend.energy import (
    REFINE_TOL, ExpansionReport, J_lambda, LambdaRule, ReducedEnergyChart, ansatz_energy,
    check_delta_derivative, critical_window, energy_derivative_theory, energy_grad_xi,
    expansion_theory, four_point, lambda_energy_shift, leading_terms, reduced_E,
    regress_coefficients, solve_critical_pair, verify_expansion,
)
from backend.errors import BracketError, DomainError, InsufficientDataError, ZeroMeanError
from backend.landscape import (
    EIGHT_PI, Configuration, evaluate_config, grad_phi_m, phi_m, singular_data,
)
from backend.surface import Field, Surface, make_grid


@pytest.fixture(scope="module")
def unit_torus():
    return Surface.flat_torus([[1.0, 0.0], [0.0, 1.0]])


@pytest.fixture(scope="module")
def grid(unit_torus):
    return make_grid(unit_torus, 128)


@pytest.fixture(scope="module")
def data(unit_torus):
    return singular_data(unit_torus)


@pytest.fixture(scope="module")
def rect_data():
    s = Surface.flat_torus([[1.0, 0.0], [0.0, 1.5]])
    return singular_data(s, sources=[([0.0, 0.0], 2.0)])


def params_at(data, grid, delta, points=([0.5, 0.5],)):
    return BubbleParams(data, Configuration.on(data.surface, points), delta, grid=grid)


def window_lambda(delta, m=1):
    return EIGHT_PI * m + delta**2 * abs(math.log(delta))


# ── J_lambda ──────────────────────────────────────────────────────────────

def test_J_of_zero_is_zero(data, grid):
    assert J_lambda(EIGHT_PI, Field(grid, np.zeros(grid.shape)), data) == pytest.approx(0.0, abs=1e-14)


def test_J_of_cosine(data, grid):
    a, lam = 0.7, 6 * math.pi
    u = Field(grid, a * np.cos(2 * math.pi * grid.points[..., 0]))
    expected = math.pi**2 * a * a - lam * math.log(i0(a))
    assert J_lambda(lam, u, data) == pytest.approx(expected, rel=1e-12)


def test_J_rejects_nonzero_mean(data, grid):
    with pytest.raises(ZeroMeanError):
        J_lambda(EIGHT_PI, Field(grid, np.ones(grid.shape)), data)


# ── expansion formulas ────────────────────────────────────────────────────

def test_expansion_at_8pi_m():
    phi, A, B, d = 0.3, 1.5, -2.0, 0.03
    expected = -EIGHT_PI * (1 + math.log(math.pi)) - 32 * math.pi**2 * phi \
        + A * d * d * math.log(d) - B * d * d
    assert expansion_theory(EIGHT_PI, d, 1, phi, A, B) == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("order", [1, 2])
def test_derivative_theory_matches_difference_quotient(order):
    lam, m, phi, A, B, d = EIGHT_PI * 2 + 0.01, 2, 0.1, 0.8, 1.7, 0.05
    h = 2e-4

    def f(x):
        if order == 1:
            return expansion_theory(lam, x, m, phi, A, B)
        return energy_derivative_theory(lam, x, m, A, B, 1)

    fd = four_point(f, d, h)
    assert energy_derivative_theory(lam, d, m, A, B, order) == pytest.approx(fd, rel=1e-6)


def test_derivative_theory_rejects_order():
    with pytest.raises(DomainError):
        energy_derivative_theory(EIGHT_PI, 0.1, 1, 0.0, 0.0, 3)


def test_lambda_shift_is_difference_of_expansions():
    d, m = 0.04, 2
    lam = EIGHT_PI * m - 0.01
    diff = expansion_theory(lam, d, m, 0.2, 1.0, 1.0) - expansion_theory(EIGHT_PI * m, d, m, 0.2, 1.0, 1.0)
    assert lambda_energy_shift(lam, d, m) == pytest.approx(diff, rel=1e-12)


def test_lambda_rule():
    rule = LambdaRule(sign=-1, c=2.0)
    assert rule(0.1, 1) == pytest.approx(EIGHT_PI - 2 * 0.01 * math.log(10))
    with pytest.raises(DomainError):
        LambdaRule(sign=2)
    with pytest.raises(DomainError):
        LambdaRule(c=-1.0)


# ── J(W) and its derivatives ──────────────────────────────────────────────

def test_delta_derivative_chain_rule_matches_quotient(data, grid):
    p = params_at(data, grid, 0.05)
    analytic, fd = check_delta_derivative(p, window_lambda(0.05))
    assert analytic == pytest.approx(fd, abs=1e-5 * (1 + abs(fd)))


def test_ansatz_energy_leading_order(data, grid):
    phi = phi_m(data, Configuration.on(data.surface, [[0.5, 0.5]]))
    errs = []
    for d in (0.04, 0.02):
        lam = window_lambda(d)
        errs.append(abs(ansatz_energy(params_at(data, grid, d), lam) - leading_terms(lam, d, 1, phi)))
    assert errs[1] < 0.4 * errs[0]


def test_grad_xi_vanishes_by_translation_invariance(data, grid):
    """k ≡ 1, m = 1: J(W) does not depend on ξ."""
    g = energy_grad_xi(params_at(data, grid, 0.05), window_lambda(0.05))
    assert np.max(np.abs(g)) < 1e-5


def test_grad_xi_follows_phi_m(data, grid):
    pts = ([0.2, 0.3], [0.7, 0.6])
    d = 0.01
    p = params_at(data, grid, d, pts)
    g = energy_grad_xi(p, window_lambda(d, 2))
    target = -32 * math.pi**2 * grad_phi_m(data, p.config)
    assert np.max(np.abs(g - target)) < 0.1 * np.max(np.abs(target))


# ── verify_expansion / ExpansionReport ────────────────────────────────────

def test_verify_expansion_needs_four_points(data):
    cfg = Configuration.on(data.surface, [[0.5, 0.5]])
    with pytest.raises(InsufficientDataError):
        verify_expansion(data, cfg, [0.04, 0.02, 0.01])


def test_verify_expansion_remainder_order(data, grid):
    cfg = Configuration.on(data.surface, [[0.5, 0.5]])
    report = verify_expansion(data, cfg, [0.04, 0.028, 0.02, 0.014], grid=grid,
                              derivatives=False, gradient=False)
    assert report.order("J") > 1.8
    table = report.table()
    assert list(table.columns[:2]) == ["delta [1]", "lambda [1]"]
    assert len(table) == 4


def test_regression_recovers_synthetic_coefficients():
    d = np.array([0.08, 0.057, 0.04, 0.028, 0.02])
    m, phi, A, B = 1, 0.1, 0.0, 3.0
    lams = np.array([LambdaRule()(x, m) for x in d])
    report = ExpansionReport(d, lams, meta={"m": m, "phi": phi, "A": A, "B": B})
    report.add("J", [expansion_theory(l, x, m, phi, A, B) + 0.1 * x**4 for l, x in zip(lams, d)],
               [expansion_theory(l, x, m, phi, A, B) for l, x in zip(lams, d)])
    A_fit, B_fit = regress_coefficients(report)
    assert abs(A_fit - A) < 5e-3
    assert B_fit == pytest.approx(B, rel=0.02)
    assert report.order("J") == pytest.approx(4.0, abs=1e-5)


def test_report_rejects_short_series():
    report = ExpansionReport([0.1, 0.05], [EIGHT_PI, EIGHT_PI])
    with pytest.raises(InsufficientDataError):
        report.add("J", [1.0], [1.0])


# ── reduced_E ─────────────────────────────────────────────────────────────

def test_reduced_energy_close_to_ansatz_energy(data, grid):
    d = 0.05
    p = params_at(data, grid, d)
    E = reduced_E(p, window_lambda(d), ansatz=Ansatz(p))
    assert E.remainder == pytest.approx(E.value - E.ansatz_value)
    assert abs(E.remainder) < 1e-3


# ── critical_window / solve_critical_pair ─────────────────────────────────

def test_critical_window_contains_root():
    lo, hi = critical_window(EIGHT_PI + 0.02, 1, 0.0, 2.0)
    assert lo < 1 / math.sqrt(2) < hi


def test_critical_window_needs_a_scale():
    with pytest.raises(BracketError):
        critical_window(EIGHT_PI + 0.02, 1, 0.0, 0.0)


def stub(A, B):
    return SimpleNamespace(phi=0.0, A=A, B=B)


def test_pair_left_of_8pi_at_the_maximum(rect_data):
    seed = Configuration.on(rect_data.surface, [[0.5, 0.75]])
    zeros = np.zeros(2)
    pair = solve_critical_pair(rect_data, EIGHT_PI - 0.02, seed, coefficients=stub(0.0, -1.0),
                               gradients=(zeros, zeros), full=False)
    assert pair.mu == pytest.approx(1.0, rel=1e-10)
    assert pair.delta == pytest.approx(math.sqrt(0.02), rel=1e-10)
    assert pair.interval[0] <= pair.mu <= pair.interval[1]
    assert pair.d_delta < 1e-8 and pair.grad_xi < 1e-8
    assert pair.curvature < 0


def test_pair_wrong_side_raises_bracket_error(rect_data):
    seed = Configuration.on(rect_data.surface, [[0.5, 0.75]])
    zeros = np.zeros(2)
    with pytest.raises(BracketError):
        solve_critical_pair(rect_data, EIGHT_PI + 0.02, seed, coefficients=stub(0.0, -1.0),
                            gradients=(zeros, zeros), full=False)


def test_pair_newton_moves_xi(rect_data):
    """A B-gradient tilts the envelope; Newton shifts ξ by O(δ²|∇B|)."""
    seed = Configuration.on(rect_data.surface, [[0.5, 0.0]])
    pair = solve_critical_pair(rect_data, EIGHT_PI + 0.02, seed, coefficients=stub(0.0, 1.0),
                               gradients=(np.zeros(2), np.array([0.5, 0.0])), full=False)
    shift = rect_data.surface.distance(pair.config.points[0], seed.points[0])
    assert 0 < shift < 1e-3
    assert pair.grad_xi < 1e-8
    assert pair.iterations > 1


def test_pair_with_positive_A(rect_data):
    seed = Configuration.on(rect_data.surface, [[0.5, 0.0]])
    zeros = np.zeros(2)
    eps, A = 0.01, 2.0
    pair = solve_critical_pair(rect_data, EIGHT_PI + eps, seed, coefficients=stub(A, 0.0),
                               gradients=(zeros, zeros), full=False)
    g = 2 + A * pair.mu**2 * (2 * math.log(pair.delta) + 1)
    assert g == pytest.approx(0.0, abs=1e-10)


def test_full_pair_zeroes_the_reduced_energy_gradient(rect_data):
    """At ξ₃ (A = 0, B < 0) the refined pair is a critical point of E_λ itself."""
    grid = make_grid(rect_data.surface, 128)
    seed = Configuration.on(rect_data.surface, [[0.5, 0.75]])
    coeffs = evaluate_config(rect_data, seed, grid)
    assert coeffs.B < 0
    eps = -abs(coeffs.B) * 0.05**2
    lam = EIGHT_PI + eps
    pair = solve_critical_pair(rect_data, lam, seed, coefficients=coeffs, grid=grid,
                               bubble_grid=grid)
    assert pair.refined
    assert pair.d_delta < REFINE_TOL and pair.grad_xi < REFINE_TOL
    assert pair.mu == pytest.approx(pair.delta / math.sqrt(abs(eps)), rel=1e-12)
    assert rect_data.surface.distance(pair.config.points[0], seed.points[0]) < 1e-4
    assert pair.curvature < 0

    energy = ReducedEnergyChart(rect_data, lam, pair.config, grid)
    d_delta = four_point(lambda d: energy([d, 0.0, 0.0]), pair.delta, 0.02 * pair.delta)
    d_xi = [four_point(lambda t, i=i: energy([pair.delta, *(t * np.eye(2)[i])]), 0.0, 2e-3)
            for i in range(2)]
    assert abs(d_delta) < 1e-5
    assert np.linalg.norm(d_xi) < 1e-5
