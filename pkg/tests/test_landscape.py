import math

import numpy as np
import pytest

from backend.errors import (
    DomainError, InadmissibleError, SingularPotentialError, UnsupportedSurfaceError,
)
from backend.landscape import (
    BasePotential, BIntegrator, Configuration, coeff_A, coeff_Btilde, existence_side,
    find_critical_points, flat_torus_identity, grad_log_rho, grad_phi_m, hessian_phi_m,
    classify, local_degree, minimum_branch_window, phi_1_map, phi_m, potential_k, rho_j,
    same_configuration, singular_data, sphere_minmax_condition,
)
from backend.surface import Surface, chart_at, make_grid

HALF_PERIODS = ([0.5, 0.0], [0.0, 0.75], [0.5, 0.75])


@pytest.fixture
def unit_torus():
    return Surface.flat_torus([[1.0, 0.0], [0.0, 1.0]])


@pytest.fixture
def rect_data():
    s = Surface.flat_torus([[1.0, 0.0], [0.0, 1.5]])
    return singular_data(s, sources=[([0.0, 0.0], 2.0)])


@pytest.fixture
def sphere():
    return Surface.round_sphere()


# ── potential_k / rho_j ───────────────────────────────────────────────────

def test_k_without_sources_is_h(unit_torus):
    data = singular_data(unit_torus)
    x = unit_torus.random_points(np.random.default_rng(0), 10)
    assert potential_k(data, x) == pytest.approx(np.ones(10), abs=1e-15)


def test_k_vanishing_order_at_source(unit_torus):
    data = singular_data(unit_torus, sources=[([0.0, 0.0], 2.0)])
    d = np.array([0.6, 0.8])
    k1, k2 = potential_k(data, 1e-3 * d), potential_k(data, 2e-3 * d)
    assert math.log(k2 / k1) / math.log(2) == pytest.approx(4.0, abs=0.05)


def test_k_at_source_raises(unit_torus):
    data = singular_data(unit_torus, sources=[([0.3, 0.3], 1.0)])
    with pytest.raises(SingularPotentialError):
        potential_k(data, [0.3, 0.3])


def test_sources_must_be_distinct_and_positive(unit_torus):
    with pytest.raises(DomainError):
        singular_data(unit_torus, sources=[([0.3, 0.3], 1.0), ([0.3, 0.3 + 1e-8], 1.0)])
    with pytest.raises(DomainError):
        singular_data(unit_torus, sources=[([0.3, 0.3], -1.0)])


def test_rho_positive(rect_data):
    cfg = Configuration.on(rect_data.surface, [[0.2, 0.4], [0.7, 1.1]])
    for j in range(2):
        assert rho_j(rect_data, cfg, j, cfg.points[j]) > 0


# ── base potentials ───────────────────────────────────────────────────────

def test_base_potential_validation(unit_torus, sphere):
    with pytest.raises(DomainError):
        BasePotential("cosine", c=1.0, amplitude=1.5)
    with pytest.raises(DomainError):
        BasePotential("quartic")
    with pytest.raises(UnsupportedSurfaceError):
        singular_data(sphere, h=BasePotential("cosine", c=2.0, amplitude=0.5))
    with pytest.raises(UnsupportedSurfaceError):
        singular_data(unit_torus, h=BasePotential("affine", c=2.0))


def test_zonal_degree_one_matches_affine(sphere):
    x = sphere.random_points(np.random.default_rng(1), 8)
    a = BasePotential("affine", c=2.0, direction=(0.0, 0.0, 0.7))
    z = BasePotential("zonal", c=2.0, direction=(0.0, 0.0, 1.0), coefficients=(0.7,))
    for name in ("value", "grad", "laplacian"):
        assert getattr(z, name)(sphere, x) == pytest.approx(getattr(a, name)(sphere, x), abs=1e-14)


def test_cosine_laplacian_matches_differences(unit_torus):
    h = BasePotential("cosine", c=2.0, amplitude=0.5, wave=(1, 2), phase=0.3)
    x = np.array([0.21, 0.67])
    e = 5e-3

    def second(v, s):
        return (h.value(unit_torus, x + s * v) - 2 * h.value(unit_torus, x)
                + h.value(unit_torus, x - s * v)) / s**2

    # Richardson on the O(e²) error of the three-point quotient
    fd = sum((4 * second(v, e / 2) - second(v, e)) / 3 for v in np.eye(2))
    assert h.laplacian(unit_torus, x) == pytest.approx(fd, rel=1e-6)


# ── phi_m ─────────────────────────────────────────────────────────────────

def test_phi_1_constant_without_sources(unit_torus):
    data = singular_data(unit_torus)
    vals = [phi_m(data, Configuration.on(unit_torus, [p]))
            for p in unit_torus.random_points(np.random.default_rng(2), 20)]
    assert max(vals) - min(vals) < 1e-12


def test_phi_m_permutation_symmetry(rect_data):
    cfg = Configuration.on(rect_data.surface, [[0.2, 0.4], [0.7, 1.1], [0.4, 0.2]])
    assert phi_m(rect_data, cfg.permuted([2, 0, 1])) == pytest.approx(phi_m(rect_data, cfg), abs=1e-13)


def test_phi_m_rejects_coincident_points(rect_data):
    cfg = Configuration.on(rect_data.surface, [[0.2, 0.4], [0.2, 0.4]])
    with pytest.raises(InadmissibleError):
        phi_m(rect_data, cfg)


def _chart_fd_gradient(data, cfg, h=1e-6):
    charts = [chart_at(data.surface, p, min(data.surface.default_r0, data.surface.injectivity_bound))
              for p in cfg.points]
    out = []
    for j, chart in enumerate(charts):
        for e in np.eye(2):
            vals = []
            for sgn in (1, -1):
                pts = cfg.points.copy()
                pts[j] = chart.from_chart(sgn * h * e)
                vals.append(phi_m(data, Configuration(pts)))
            out.append((vals[0] - vals[1]) / (2 * h))
    return np.array(out)


def test_grad_phi_m_matches_differences_torus(unit_torus):
    h = BasePotential("cosine", c=2.0, amplitude=0.6, wave=(1, 1))
    data = singular_data(unit_torus, h=h, sources=[([0.1, 0.1], 1.5)])
    cfg = Configuration.on(unit_torus, [[0.35, 0.6], [0.8, 0.2]])
    assert grad_phi_m(data, cfg) == pytest.approx(_chart_fd_gradient(data, cfg), rel=1e-6, abs=1e-8)


def test_grad_phi_m_matches_differences_sphere(sphere):
    h = BasePotential("affine", c=2.0, direction=(0.3, -0.2, 0.5))
    data = singular_data(sphere, h=h, sources=[([0.0, 0.0, 1.0], 1.0)])
    pts = sphere.random_points(np.random.default_rng(3), 2)
    cfg = Configuration.on(sphere, pts)
    assert grad_phi_m(data, cfg) == pytest.approx(_chart_fd_gradient(data, cfg), rel=1e-6, abs=1e-8)


def test_critical_point_identity_at_half_period(rect_data):
    cfg = Configuration.on(rect_data.surface, [HALF_PERIODS[2]])
    g = grad_log_rho(rect_data, cfg, 0, cfg.points[0])
    assert np.max(np.abs(g)) < 1e-8
    assert np.max(np.abs(grad_phi_m(rect_data, cfg))) < 1e-8


# ── A ─────────────────────────────────────────────────────────────────────

def test_A_constant_k_one_point(unit_torus):
    data = singular_data(unit_torus)
    cfg = Configuration.on(unit_torus, [[0.3, 0.4]])
    rho = math.exp(8 * math.pi * data.green.robin())
    assert coeff_A(data, cfg) == pytest.approx(4 * math.pi * rho * 8 * math.pi, rel=1e-10)


def test_A_sphere_single_point(sphere):
    h = BasePotential("affine", c=2.0, direction=(0.2, 0.1, 0.6))
    data = singular_data(sphere, h=h)
    xi = np.array([0.48, 0.6, 0.64])
    cfg = Configuration.on(sphere, [xi])
    expected = 4 * math.pi * math.exp(8 * math.pi * data.green.robin()) * float(h.laplacian(sphere, xi))
    assert coeff_A(data, cfg) == pytest.approx(expected, rel=1e-9)


@pytest.mark.parametrize("sources,m", [([([0.0, 0.0], 2.0)], 1),
                                       ([([0.0, 0.0], 2.0), ([0.5, 0.5], 2.0)], 2)])
def test_flat_torus_A_identity(sources, m):
    s = Surface.flat_torus([[1.0, 0.0], [0.2, 1.1]])
    data = singular_data(s, sources=sources)
    rng = np.random.default_rng(4)
    checked = 0
    while checked < 5:
        cfg = Configuration.on(s, s.random_points(rng, m))
        try:
            A, rhs = flat_torus_identity(data, cfg)
        except DomainError:
            continue
        assert abs(A - rhs) / (1 + abs(A)) < 1e-8
        checked += 1


# ── B ─────────────────────────────────────────────────────────────────────

@pytest.fixture
def rect_integrator(rect_data):
    grid = make_grid(rect_data.surface, 128)
    cfg = Configuration.on(rect_data.surface, [HALF_PERIODS[2]])
    return BIntegrator(rect_data, cfg, grid)


def test_B_independent_of_excision_radius(rect_integrator):
    b0 = rect_integrator.sharp()
    b1 = rect_integrator.sharp(rect_integrator.r0 / 2)
    assert abs(b0 - b1) < 1e-6 * (1 + abs(b0))


def test_B_independent_of_cutoff_profile(rect_integrator):
    b0 = rect_integrator.sharp()
    for profile in ("quintic", "smooth"):
        assert abs(rect_integrator.smooth(profile) - b0) < 1e-6 * (1 + abs(b0))


def test_B_rejects_radius_outside_range(rect_integrator):
    with pytest.raises(DomainError):
        rect_integrator.sharp(0.0)
    with pytest.raises(DomainError):
        rect_integrator.sharp(2 * rect_integrator.r0)


def test_B_signs_at_rectangular_half_periods(rect_data):
    grid = make_grid(rect_data.surface, 128)
    kinds = {}
    for p in HALF_PERIODS:
        cfg = Configuration.on(rect_data.surface, [p])
        eig = np.linalg.eigvalsh(hessian_phi_m(rect_data, cfg))
        kinds.setdefault(classify(eig), []).append(BIntegrator(rect_data, cfg, grid).sharp())
    assert sorted(kinds) == ["max", "saddle"]
    assert len(kinds["saddle"]) == 2
    assert all(b > 0 for b in kinds["saddle"])
    assert kinds["max"][0] < 0


def test_B_two_point_sphere_radius_independence(sphere):
    h = BasePotential("zonal", c=2.0, coefficients=(0.6, 0.1))
    data = singular_data(sphere, h=h)
    cfg = Configuration.on(sphere, [[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]])
    bi = BIntegrator(data, cfg, make_grid(sphere, 128))
    b0 = bi.sharp()
    assert abs(bi.sharp(bi.r0 / 2) - b0) < 1e-6 * (1 + abs(b0))


# ── B̃ ───────────────────────────────────────────────────────────────────

def test_Btilde_value_and_surface(unit_torus, sphere):
    data = singular_data(unit_torus)
    cfg = Configuration.on(unit_torus, [[0.1, 0.2]])
    rho = float(rho_j(data, cfg, 0, cfg.points[0]))
    assert coeff_Btilde(data, cfg) == pytest.approx(32 * math.pi / 3 / rho)
    with pytest.raises(UnsupportedSurfaceError):
        coeff_Btilde(singular_data(sphere), Configuration.on(sphere, [[0.0, 0.0, 1.0]]))


# ── critical points ───────────────────────────────────────────────────────

def test_rectangular_torus_has_three_critical_points(rect_data):
    found = find_critical_points(rect_data, 1, budget=32, seed=1, with_B=False)
    assert len(found) == 3
    for p in HALF_PERIODS:
        target = Configuration.on(rect_data.surface, [p])
        assert any(same_configuration(rect_data.surface, c, target, 1e-7) for c, _ in found)
    assert sorted(r.classification for _, r in found) == ["max", "saddle", "saddle"]


def test_two_point_minimum_exists(unit_torus):
    data = singular_data(unit_torus)
    found = find_critical_points(data, 2, budget=8, seed=0, with_B=False)
    kinds = [r.classification for _, r in found]
    assert "min" in kinds or "degenerate" in kinds
    # every reported configuration has zero gradient and distinct points
    for cfg, rep in found:
        assert np.linalg.norm(rep.grad) < 1e-8
        assert unit_torus.distance(cfg.points[0], cfg.points[1]) > 1e-3


def test_same_configuration_ignores_order(unit_torus):
    a = Configuration.on(unit_torus, [[0.1, 0.2], [0.6, 0.7]])
    assert same_configuration(unit_torus, a, a.permuted([1, 0]))
    assert not same_configuration(unit_torus, a, Configuration.on(unit_torus, [[0.1, 0.2], [0.6, 0.8]]))


def test_local_degree_matches_classification(rect_data):
    for p in HALF_PERIODS:
        cfg = Configuration.on(rect_data.surface, [p])
        kind = classify(np.linalg.eigvalsh(hessian_phi_m(rect_data, cfg)))
        assert local_degree(rect_data, cfg) == (1 if kind in ("max", "min") else -1)


def test_phi_1_map_shape(rect_data):
    pts, vals = phi_1_map(rect_data, 16)
    assert pts.shape == (16, 16, 2) and vals.shape == (16, 16)
    assert np.all(np.isfinite(vals))


# ── existence diagnostics ─────────────────────────────────────────────────

def test_existence_side():
    assert existence_side(1.0, -5.0) == "right"
    assert existence_side(-1.0, 5.0) == "left"
    assert existence_side(0.0, 2.0) == "right"
    assert existence_side(0.0, -2.0) == "left"
    assert existence_side(0.0, 0.0) is None


def test_minimum_branch_window_sphere(sphere):
    lo, hi = minimum_branch_window(singular_data(sphere), n=32)
    assert lo == pytest.approx(1.0) and hi == pytest.approx(1.0)
    with pytest.raises(DomainError):
        minimum_branch_window(singular_data(sphere, sources=[([0, 0, 1.0], 1.0)]))


def test_sphere_minmax_condition(sphere):
    data = singular_data(sphere, sources=[([0, 0, 1.0], 1.5), ([1.0, 0, 0], 2.5)])
    out = sphere_minmax_condition(data, 2)
    assert out["holds"] and out["J"] == [0, 1] and out["A_sign"] == -1
    resonant = singular_data(sphere, sources=[([0, 0, 1.0], 1.0), ([1.0, 0, 0], 2.0)])
    assert not sphere_minmax_condition(resonant, 2)["holds"]
