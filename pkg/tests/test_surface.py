import math

import numpy as np
import pytest

from backend.errors import ChartRadiusError, DomainError, UnsupportedSurfaceError, ZeroMeanError
from backend.surface import (
    CUTOFF_PROFILES, PeriodicInterpolant, Surface, chart_at, chart_pde_residual, cutoff_profile,
    dirichlet_energy, gauss_bonnet_defect, gradient, graded_radii, integrate, integrate_radial,
    laplacian, make_grid, poisson_solve, polar_nodes,
)


@pytest.fixture
def unit_torus():
    return Surface.flat_torus([[1.0, 0.0], [0.0, 1.0]])


@pytest.fixture
def sphere():
    return Surface.round_sphere()


# ── Surface ───────────────────────────────────────────────────────────────

def test_flat_torus_area_and_curvature(unit_torus):
    assert unit_torus.area == pytest.approx(1.0)
    assert unit_torus.euler_characteristic == 0
    assert np.all(unit_torus.curvature(np.zeros((3, 2))) == 0.0)


def test_flat_torus_reduces_skewed_basis():
    """(1,0),(3,1) spans the unit square lattice; reduction recovers it."""
    s = Surface.flat_torus([[1.0, 0.0], [3.0, 1.0]])
    assert s.area == pytest.approx(1.0)
    norms = sorted(np.linalg.norm(s.basis, axis=1))
    assert norms == pytest.approx([1.0, 1.0])
    assert np.linalg.det(s.basis) > 0


def test_flat_torus_rejects_degenerate_periods():
    with pytest.raises(DomainError):
        Surface.flat_torus([[1.0, 2.0], [2.0, 4.0]])


def test_sphere_area_and_gauss_bonnet(sphere):
    grid = make_grid(sphere, 64)
    assert sphere.area == pytest.approx(4 * math.pi)
    assert gauss_bonnet_defect(grid) < 1e-10


def test_displacement_wraps_to_shortest(unit_torus):
    d = unit_torus.displacement([0.95, 0.5], [0.05, 0.5])
    assert d == pytest.approx([-0.1, 0.0])


def test_normalize_lands_in_fundamental_cell(unit_torus):
    x = unit_torus.normalize([[2.25, -0.5]])
    assert x[0] == pytest.approx([0.25, 0.5])


# ── chart_at ──────────────────────────────────────────────────────────────

def test_torus_chart_is_shift(unit_torus):
    chart = chart_at(unit_torus, [0.3, 0.7], 0.2)
    y = chart.to_chart(np.array([[0.35, 0.65]]))
    assert y[0] == pytest.approx([0.05, -0.05])
    assert np.all(chart.conformal_factor(y) == 0.0)


def test_chart_radius_too_large(unit_torus, sphere):
    with pytest.raises(ChartRadiusError):
        chart_at(unit_torus, [0.0, 0.0], 0.3)
    with pytest.raises(ChartRadiusError):
        chart_at(sphere, [0.0, 0.0, 1.0], 1.0)


def test_sphere_chart_normalization(sphere):
    chart = chart_at(sphere, [0.0, 0.0, -1.0], 0.5)
    f = chart.conformal_factor
    h = 1e-5
    gx = (f(np.array([h, 0.0])) - f(np.array([-h, 0.0]))) / (2 * h)
    gy = (f(np.array([0.0, h])) - f(np.array([0.0, -h]))) / (2 * h)
    assert abs(f(np.zeros(2))) < 1e-14
    assert math.hypot(gx, gy) < 1e-10


def test_sphere_chart_laplacian_at_origin(sphere):
    chart = chart_at(sphere, [0.0, 0.0, -1.0], 0.5)
    f = chart.conformal_factor
    h = 1e-3
    lap = 0.0
    for e in (np.array([h, 0.0]), np.array([0.0, h])):
        lap += (-f(2 * e) + 16 * f(e) - 30 * f(np.zeros(2)) + 16 * f(-e) - f(-2 * e)) / (12 * h * h)
    assert lap == pytest.approx(-2.0, abs=1e-8)


def test_sphere_chart_round_trip_at_random_center(sphere):
    rng = np.random.default_rng(3)
    xi = sphere.random_points(rng, 1)[0]
    chart = chart_at(sphere, xi, 0.5)
    assert chart.from_chart(np.zeros(2)) == pytest.approx(xi)
    y = rng.uniform(-0.4, 0.4, size=(10, 2))
    assert chart.to_chart(chart.from_chart(y)) == pytest.approx(y, abs=1e-12)


def test_sphere_chart_pde_residual(sphere):
    chart = chart_at(sphere, [0.6, 0.0, 0.8], 0.5)
    assert chart_pde_residual(chart) < 1e-6


# ── cutoff profiles ───────────────────────────────────────────────────────

@pytest.mark.parametrize("name", CUTOFF_PROFILES)
def test_cutoff_profile_support(name):
    chi = cutoff_profile(name, 0.2)
    assert chi.chi(np.array([0.0, 0.1, 0.2])) == pytest.approx([1.0, 1.0, 1.0])
    assert chi.chi(np.array([0.4, 0.5])) == pytest.approx([0.0, 0.0])
    mid = chi.chi(np.array([0.3]))[0]
    assert 0.0 < mid < 1.0


@pytest.mark.parametrize("name", CUTOFF_PROFILES)
def test_cutoff_derivatives_match_differences(name):
    chi = cutoff_profile(name, 0.2)
    r = np.array([0.23, 0.27, 0.31, 0.36])
    h = 1e-6
    _, d1, d2 = chi.derivatives(r)
    assert d1 == pytest.approx((chi.chi(r + h) - chi.chi(r - h)) / (2 * h), rel=1e-5, abs=1e-6)
    h = 1e-4
    fd2 = (chi.chi(r + h) - 2 * chi.chi(r) + chi.chi(r - h)) / h**2
    assert d2 == pytest.approx(fd2, rel=1e-3, abs=1e-3)


@pytest.mark.parametrize("name", CUTOFF_PROFILES)
def test_transition_rule_integrates_chi_prime(name):
    chi = cutoff_profile(name, 0.2)
    t, w = chi.transition()
    assert t.min() > 0.2 and t.max() < 0.4
    _, d1, _ = chi.derivatives(t)
    assert float(np.sum(w * d1)) == pytest.approx(-1.0, abs=1e-10)


def test_unknown_cutoff_profile():
    with pytest.raises(DomainError):
        cutoff_profile("cubic", 0.2)


# ── integrate ─────────────────────────────────────────────────────────────

def test_integrate_constant(unit_torus, sphere):
    tg = make_grid(unit_torus, 32)
    sg = make_grid(sphere, 64)
    assert integrate(tg, np.ones(tg.shape)) == pytest.approx(1.0, abs=1e-14)
    assert integrate(sg, np.ones(sg.shape)) == pytest.approx(4 * math.pi, abs=1e-10)


def test_bubble_mass_on_disk():
    """2π∫₀^{r₀} 8δ²/(δ²+r²)² r dr = 8π(1 − δ²/(δ²+r₀²))."""
    delta, r0 = 0.05, 0.25
    g = lambda r: 8 * delta**2 / (delta**2 + r**2) ** 2
    expected = 8 * math.pi * (1 - delta**2 / (delta**2 + r0**2))
    assert integrate_radial(g, r0, delta) == pytest.approx(expected, abs=1e-10)


def test_polar_nodes_disk_area():
    _, w = polar_nodes(0.3, 0.01)
    assert np.sum(w) == pytest.approx(math.pi * 0.09, rel=1e-13)


def test_graded_radii_annulus_covers_interval():
    r, w = graded_radii(1.0, 0.0, r_inner=0.1)
    assert r.min() > 0.1 and r.max() < 1.0
    assert np.sum(w) == pytest.approx(0.9, rel=1e-13)


# ── Field ─────────────────────────────────────────────────────────────────

def test_field_is_read_only_and_zero_mean(unit_torus):
    grid = make_grid(unit_torus, 16)
    f = grid.evaluate(lambda x: np.cos(2 * math.pi * x[..., 0]))
    assert f.is_zero_mean
    assert not f.values.flags.writeable
    assert not (f + 1.0).is_zero_mean


def test_field_shape_mismatch(unit_torus):
    grid = make_grid(unit_torus, 16)
    with pytest.raises(DomainError):
        grid.field(np.zeros((8, 8)))


# ── poisson_solve ─────────────────────────────────────────────────────────

def test_poisson_single_mode(unit_torus):
    grid = make_grid(unit_torus, 32)
    rhs = grid.evaluate(lambda x: np.cos(2 * math.pi * x[..., 0]))
    u = poisson_solve(grid, rhs)
    assert u.values == pytest.approx(rhs.values / (4 * math.pi**2), abs=1e-14)


def test_poisson_zero_rhs(unit_torus):
    grid = make_grid(unit_torus, 32)
    assert poisson_solve(grid, grid.field(np.zeros(grid.shape))).sup() == 0.0


def test_poisson_round_trip_rect_torus():
    s = Surface.flat_torus([[1.0, 0.0], [0.3, 1.5]])
    grid = make_grid(s, 128)
    rng = np.random.default_rng(0)
    v = np.zeros(grid.shape)
    for _ in range(6):
        k = rng.integers(-4, 5, size=2)
        q = 2 * math.pi * s.basis_inv @ k
        v += rng.normal() * np.cos(grid.points @ q + rng.uniform(0, 2 * math.pi))
    v = grid.field(v).centered()
    u = poisson_solve(grid, laplacian(v))
    assert np.max(np.abs(u.values + v.values)) < 1e-10


def test_poisson_rejects_nonzero_mean(unit_torus):
    grid = make_grid(unit_torus, 16)
    with pytest.raises(ZeroMeanError):
        poisson_solve(grid, grid.field(np.ones(grid.shape)))


def test_poisson_sphere_unsupported(sphere):
    grid = make_grid(sphere, 32)
    with pytest.raises(UnsupportedSurfaceError):
        poisson_solve(grid, grid.field(np.zeros(grid.shape)))


# ── spectral calculus ─────────────────────────────────────────────────────

def test_gradient_and_dirichlet_energy(unit_torus):
    grid = make_grid(unit_torus, 32)
    u = grid.evaluate(lambda x: np.cos(2 * math.pi * x[..., 0]))
    g = gradient(u)
    expected = -2 * math.pi * np.sin(2 * math.pi * grid.points[..., 0])
    assert g[..., 0] == pytest.approx(expected, abs=1e-12)
    assert np.max(np.abs(g[..., 1])) < 1e-12
    assert dirichlet_energy(u) == pytest.approx(2 * math.pi**2, rel=1e-12)


def test_periodic_interpolant_off_grid(unit_torus):
    grid = make_grid(unit_torus, 128)
    fn = lambda x: np.sin(2 * math.pi * x[..., 0]) * np.cos(2 * math.pi * x[..., 1])
    interp = PeriodicInterpolant(grid.evaluate(fn))
    x = np.random.default_rng(1).uniform(-1.0, 2.0, size=(50, 2))
    assert interp(x) == pytest.approx(fn(x), abs=1e-6)
