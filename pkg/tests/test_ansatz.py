import math

import numpy as np
import pytest

from backend.ansatz import (
    Ansatz, BubbleParams, LinearizedOperator, StarNorm, alpha_constant, apply_L, bubble_U,
    kernel_elements, kernel_normalization, lambda_window, projection_errors, liouville_kernel,
    ProjectedBubble, near_kernel_spectrum, nonlinear_N, project_bubble, residual_integral,
    residual_R, solve_F, solve_projected_correction, star_norm,
)
from backend.errors import DomainError, UnsupportedSurfaceError, ZeroMeanError
from backend.landscape import EIGHT_PI, Configuration, singular_data
from backend.surface import Field, Surface, integrate, make_grid


@pytest.fixture(scope="module")
def unit_torus():
    return Surface.flat_torus([[1.0, 0.0], [0.0, 1.0]])


@pytest.fixture(scope="module")
def grid(unit_torus):
    return make_grid(unit_torus, 128)


@pytest.fixture(scope="module")
def data(unit_torus):
    return singular_data(unit_torus)


def params_at(data, grid, delta, points=([0.5, 0.5],)):
    return BubbleParams(data, Configuration.on(data.surface, points), delta, grid=grid)


def smooth_zero_mean(grid, seed=0):
    rng = np.random.default_rng(seed)
    x = grid.points
    out = np.zeros(grid.shape)
    for k1, k2 in [(1, 0), (0, 1), (1, 1), (2, -1), (3, 2)]:
        a, b = rng.standard_normal(2)
        t = 2 * math.pi * (k1 * x[..., 0] + k2 * x[..., 1])
        out += a * np.cos(t) + b * np.sin(t)
    return Field(grid, out - out.mean())


# ── profiles ──────────────────────────────────────────────────────────────

def test_liouville_kernel_values():
    Y = liouville_kernel(np.array([[0.0, 0.0], [0.6, 0.8], [1.0, 0.0]]))
    assert Y[0] == pytest.approx([2.0, 0.0, 0.0])
    assert Y[1, 0] == pytest.approx(0.0, abs=1e-15)
    assert Y[2] == pytest.approx([0.0, 2.0, 0.0])


def test_kernel_normalization():
    assert kernel_normalization() == pytest.approx(math.pi / 2, abs=1e-10)


# ── BubbleParams ──────────────────────────────────────────────────────────

def test_params_deltas_follow_rho(data, grid):
    p = params_at(data, grid, 0.05)
    assert p.deltas[0] ** 2 == pytest.approx(0.05**2 * p.rho[0], rel=1e-14)


def test_params_validation(data, grid):
    with pytest.raises(DomainError):
        params_at(data, grid, 0.0)
    with pytest.raises(UnsupportedSurfaceError):
        BubbleParams(singular_data(Surface.round_sphere()),
                     Configuration.on(Surface.round_sphere(), [[0.0, 0.0, 1.0]]), 0.05)


def test_lambda_window_warns(data, grid, caplog):
    p = params_at(data, grid, 0.05)
    assert lambda_window(p, EIGHT_PI + 0.05**2 * abs(math.log(0.05)))
    assert not lambda_window(p, EIGHT_PI + 1.0)
    assert "outside the window" in caplog.text


# ── project_bubble ────────────────────────────────────────────────────────

def test_cut_mass_matches_radial_identity(data, grid):
    b = project_bubble(params_at(data, grid, 0.05), 0)
    assert b.c * data.surface.area == pytest.approx(b.cut_mass_exact(), abs=1e-6)
    assert b.cut_mass_exact() < EIGHT_PI


def test_projected_bubble_has_zero_mean(data, grid):
    p = params_at(data, grid, 0.05)
    b = project_bubble(p, 0)
    assert p.quadrature.integrate(b) == pytest.approx(0.0, abs=1e-7)


def test_bubble_U_peak(data, grid):
    p = params_at(data, grid, 0.05, points=([0.0, 0.0],))
    U = bubble_U(p, 0)
    d = p.deltas[0]
    assert U.values[0, 0] == pytest.approx(math.log(8 / d**2), rel=1e-14)


def test_far_field_error_is_second_order(data, grid):
    e1 = projection_errors(params_at(data, grid, 0.04))["far"]
    e2 = projection_errors(params_at(data, grid, 0.02))["far"]
    assert math.log(e1 / e2, 2) > 1.7


def test_full_expansion_error_is_higher_order(data, grid):
    e1 = projection_errors(params_at(data, grid, 0.04))
    e2 = projection_errors(params_at(data, grid, 0.02))
    assert e2["full"] < e2["far"]
    assert math.log(e1["full"] / e2["full"], 2) > 2.6


def test_alpha_scales_like_delta_squared_log(data, grid):
    a1 = alpha_constant(params_at(data, grid, 0.01), 0)
    a2 = alpha_constant(params_at(data, grid, 0.005), 0)
    assert a1 > 0 and a2 > 0
    assert a1 / a2 == pytest.approx(4 * math.log(0.01) / math.log(0.005), rel=0.2)


def test_F_has_zero_mean(data, grid):
    F = solve_F(params_at(data, grid, 0.05), 0)
    assert F.is_zero_mean


def test_default_profile_is_quintic(data, grid):
    assert params_at(data, grid, 0.05).chi.name == "quintic"


def test_projection_builds_on_default_grid(data, grid):
    b = project_bubble(params_at(data, grid, 0.05), 0)
    assert np.all(np.isfinite(b.field.values))
    assert b.c > 0


def test_projection_errors_end_to_end(data, grid):
    row = projection_errors(params_at(data, grid, 0.05))
    assert set(row) == {"delta", "delta_j", "alpha", "far", "full"}
    assert all(math.isfinite(v) for v in row.values())
    assert row["far"] < 0.05**2 * 100


def test_split_projection_matches_grid_projection(data):
    fine = make_grid(data.surface, 256)
    p = BubbleParams(data, Configuration.on(data.surface, [[0.5, 0.5]]), 0.05,
                     profile="smooth", grid=fine)
    split = ProjectedBubble(fine, p.chi, [0.5, 0.5], p.deltas[0], data.green)
    plain = ProjectedBubble(fine, p.chi, [0.5, 0.5], p.deltas[0])
    assert np.max(np.abs(split.field.values - plain.field.values)) < 1e-6
    x = np.array([[0.31, 0.47], [0.52, 0.5], [0.9, 0.1]])
    assert split(x) == pytest.approx(plain(x), abs=1e-5)

# ── ansatz_W / residual_R ─────────────────────────────────────────────────

def test_residual_integrates_to_zero(data, grid):
    p = params_at(data, grid, 0.04)
    lam = EIGHT_PI + 0.04**2 * abs(math.log(0.04))
    assert residual_integral(p, lam) == pytest.approx(0.0, abs=1e-8)


def test_kew_integral_leading_order(data, grid):
    devs = []
    for d in (0.04, 0.02):
        W = Ansatz(params_at(data, grid, d))
        devs.append(abs(d * d * W.kew_integral / math.pi - 1.0))
    assert devs[1] < 0.45 * devs[0]


def test_two_bubble_ansatz_is_symmetric(data, grid):
    p = params_at(data, grid, 0.05, points=([0.25, 0.5], [0.75, 0.5]))
    W = Ansatz(p)
    assert p.deltas[0] == pytest.approx(p.deltas[1], rel=1e-12)
    assert W([0.1, 0.3]) == pytest.approx(W([0.9, 0.3]), abs=1e-8)


def test_dirichlet_energy_positive(data, grid):
    W = Ansatz(params_at(data, grid, 0.05))
    assert W.dirichlet() > 0


# ── star_norm ─────────────────────────────────────────────────────────────

def test_star_norm_weight_at_centre(data, grid):
    p = params_at(data, grid, 0.05)
    norm = StarNorm(p, 0.5)
    d = p.deltas[0]
    assert norm.weight(p.config.points[0]) == pytest.approx(d**2, rel=1e-12)


def test_star_norm_scales_linearly(data, grid):
    p = params_at(data, grid, 0.05)
    norm = StarNorm(p)
    R = residual_R(p, EIGHT_PI)
    assert star_norm(norm, 2 * R) == pytest.approx(2 * star_norm(norm, R))


def test_sigma_range(data, grid):
    with pytest.raises(DomainError):
        StarNorm(params_at(data, grid, 0.05), 1.0)


# ── kernel_elements ───────────────────────────────────────────────────────

def test_pairing_matrix_is_nearly_diagonal(data, grid):
    p = params_at(data, grid, 0.02, points=([0.25, 0.5], [0.75, 0.5]))
    M = kernel_elements(p).pairing_matrix()
    dip = M[:4, :4]
    assert np.diag(dip) == pytest.approx(np.full(4, -32 * math.pi / 3), rel=0.05)
    off = dip - np.diag(np.diag(dip))
    assert np.max(np.abs(off)) < 1.0


def test_projected_kernels_have_zero_mean(data, grid):
    p = params_at(data, grid, 0.05)
    ks = kernel_elements(p)
    for a in range(ks.size):
        assert p.quadrature.integrate(ks.P(a)) == pytest.approx(0.0, abs=1e-7)


def test_projected_kernels_close_to_cut_kernels(data, grid):
    errs = kernel_elements(params_at(data, grid, 0.02)).approximation_errors()
    assert errs["dipole"] < 0.1
    assert errs["radial"] < 0.05


# ── LinearizedOperator ────────────────────────────────────────────────────

def test_L_integrates_to_zero(data, grid):
    op = LinearizedOperator(params_at(data, grid, 0.05), EIGHT_PI)
    Lphi = apply_L(op, smooth_zero_mean(grid))
    assert integrate(grid, Lphi) == pytest.approx(0.0, abs=1e-9)


def test_L_rejects_nonzero_mean(data, grid):
    op = LinearizedOperator(params_at(data, grid, 0.05), EIGHT_PI)
    with pytest.raises(ZeroMeanError):
        apply_L(op, Field(grid, np.ones(grid.shape)))


def test_N_is_quadratic(data, grid):
    op = LinearizedOperator(params_at(data, grid, 0.05), EIGHT_PI)
    phi = smooth_zero_mean(grid, seed=3)
    n1 = nonlinear_N(op, 1e-3 * phi).sup()
    n2 = nonlinear_N(op, 5e-4 * phi).sup()
    assert n1 / n2 == pytest.approx(4.0, rel=0.05)
    assert integrate(grid, nonlinear_N(op, 1e-3 * phi)) == pytest.approx(0.0, abs=1e-10)


def test_projection_lifts_near_kernel(data, grid):
    p = params_at(data, grid, 0.05)
    op = LinearizedOperator(p, EIGHT_PI)
    free = near_kernel_spectrum(op, count=4)
    projected = near_kernel_spectrum(op, kernel_elements(p), count=4)
    assert np.all(np.diff(np.abs(free)) >= 0)
    assert abs(projected[0]) > abs(free[0])


# ── solve_projected_correction ────────────────────────────────────────────

def test_correction_converges_and_is_orthogonal(data, grid):
    d = 0.05
    p = params_at(data, grid, d)
    corr = solve_projected_correction(p, EIGHT_PI + d * d * abs(math.log(d)), tol=1e-9)
    assert corr.phi.is_zero_mean
    assert np.max(corr.orthogonality) < 1e-9
    assert corr.sup < 0.1
    assert corr.cij.shape == (1, 2)


def test_correction_rejects_large_delta(data, grid):
    with pytest.raises(DomainError):
        solve_projected_correction(params_at(data, grid, 0.2), EIGHT_PI)
