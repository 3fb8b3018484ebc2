# backend/landscape.py
"""Singular potential k, bubble weights ρ_j, the reduced energy φ_m and the
concentration coefficients A(ξ), B(ξ), B̃(ξ).

Gradients of configuration functions are returned in chart coordinates at each
ξ_j (on the torus these are plain Cartesian components), flattened to a
2m-vector ordered (ξ_1ˣ, ξ_1ʸ, ξ_2ˣ, …).
"""

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre
from numpy.polynomial.legendre import leggauss
from scipy.optimize import least_squares
from scipy.stats import qmc

from backend.errors import (
    DomainError, InadmissibleError, InconsistencyError, SingularPotentialError,
    UnsupportedSurfaceError,
)
from backend.greens import FOUR_PI, GreenEvaluator
from backend.quadrature import HybridQuadrature, partition_bump
from backend.surface import Surface, chart_at, cutoff_profile, graded_radii, make_grid

logger = logging.getLogger(__name__)

EIGHT_PI = 8 * math.pi
H_KINDS = ("constant", "cosine", "affine", "zonal")
SOURCE_SEPARATION = 1e-6
POINT_SEPARATION = 1e-6
A_CHECK_TOL = 1e-4
DEGENERACY_RATIO = 1e-6
DEDUP_DISTANCE = 1e-6

_SOURCE_HIT = 1e-12
_MEAN_ANGLES = 64
_PANEL_ORDER = 16


# ── base potential h ──────────────────────────────────────────────────────

@dataclass(frozen=True)
class BasePotential:
    """Smooth positive h.

    constant: h = c
    cosine (torus): h = c + a·cos(q·x + phase), q = 2π B⁻¹ wave
    affine (sphere): h = c + direction·x
    zonal (sphere): h = c + Σ_l coefficients[l-1]·P_l(axis·x)
    """

    kind: str = "constant"
    c: float = 1.0
    amplitude: float = 0.0
    wave: tuple = (1, 0)
    phase: float = 0.0
    direction: tuple = (0.0, 0.0, 1.0)
    coefficients: tuple = ()

    def __post_init__(self):
        if self.kind not in H_KINDS:
            raise DomainError(f"unknown base potential {self.kind!r}; choose from {H_KINDS}")
        if self.lower_bound() <= 0:
            raise DomainError(f"base potential {self.kind} is not positive (lower bound "
                              f"{self.lower_bound():.6g})")

    def lower_bound(self):
        if self.kind == "cosine":
            return self.c - abs(self.amplitude)
        if self.kind == "affine":
            return self.c - float(np.linalg.norm(self.direction))
        if self.kind == "zonal":
            return self.c - sum(abs(a) for a in self.coefficients)
        return self.c

    def check_surface(self, surface):
        if self.kind == "cosine" and not surface.is_torus:
            raise UnsupportedSurfaceError("cosine base potential lives on the torus")
        if self.kind in ("affine", "zonal") and surface.is_torus:
            raise UnsupportedSurfaceError(f"{self.kind} base potential lives on the sphere")

    def _q(self, surface):
        return 2 * math.pi * surface.basis_inv @ np.asarray(self.wave, dtype=float)

    def _legendre(self):
        return np.concatenate([[0.0], np.asarray(self.coefficients, dtype=float)])

    def _axis(self):
        e = np.asarray(self.direction, dtype=float)
        return e / np.linalg.norm(e)

    def value(self, surface, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "cosine":
            return self.c + self.amplitude * np.cos(x @ self._q(surface) + self.phase)
        if self.kind == "affine":
            return self.c + x @ np.asarray(self.direction, dtype=float)
        if self.kind == "zonal":
            return self.c + legendre.legval(x @ self._axis(), self._legendre())
        return np.full(x.shape[:-1], float(self.c))

    def grad(self, surface, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "cosine":
            q = self._q(surface)
            return (-self.amplitude * np.sin(x @ q + self.phase))[..., None] * q
        if self.kind == "affine":
            a = np.asarray(self.direction, dtype=float)
            return a - (x @ a)[..., None] * x
        if self.kind == "zonal":
            e = self._axis()
            t = x @ e
            d = legendre.legval(t, legendre.legder(self._legendre()))
            return d[..., None] * (e - t[..., None] * x)
        return np.zeros(x.shape)

    def laplacian(self, surface, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "cosine":
            q = self._q(surface)
            return -self.amplitude * (q @ q) * np.cos(x @ q + self.phase)
        if self.kind == "affine":
            return -2.0 * (x @ np.asarray(self.direction, dtype=float))
        if self.kind == "zonal":
            coef = self._legendre()
            ell = np.arange(len(coef))
            return legendre.legval(x @ self._axis(), -ell * (ell + 1) * coef)
        return np.zeros(x.shape[:-1])


# ── singular data and configurations ──────────────────────────────────────

@dataclass(frozen=True, eq=False)
class SingularData:
    """Base potential h and sources (p_j, n_j) on a surface; k = h·e^{−4πΣn_jG(·,p_j)}."""

    surface: Surface
    h: BasePotential = field(default_factory=BasePotential)
    sources: tuple = ()
    green: GreenEvaluator = None

    def __post_init__(self):
        self.h.check_surface(self.surface)
        cleaned = []
        for p, n in self.sources:
            if not n > 0:
                raise DomainError(f"source multiplicity must be positive, got {n}")
            cleaned.append((self.surface.normalize(np.asarray(p, dtype=float)), float(n)))
        for (i, (p, _)), (j, (q, _)) in itertools.combinations(enumerate(cleaned), 2):
            if self.surface.distance(p, q) <= SOURCE_SEPARATION:
                raise DomainError(f"sources {i} and {j} coincide (separation ≤ {SOURCE_SEPARATION})")
        object.__setattr__(self, "sources", tuple(cleaned))
        if self.green is None:
            object.__setattr__(self, "green", GreenEvaluator(self.surface))

    @property
    def N(self):
        return float(sum(n for _, n in self.sources))

    @property
    def rough_sources(self):
        """Sources with non-integer n_j, where k is only finitely smooth."""
        return [p for p, n in self.sources if not float(n).is_integer()]


def singular_data(surface, h=None, sources=(), method="theta", cutoff=None):
    green = GreenEvaluator(surface, method, cutoff)
    return SingularData(surface, h or BasePotential(), tuple(sources), green)


@dataclass(frozen=True, eq=False)
class Configuration:
    """m concentration points, stored as canonical representatives (m, d)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or len(pts) == 0:
            raise DomainError("a configuration needs at least one point, shape (m, d)")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def on(cls, surface, points):
        return cls(surface.normalize(np.atleast_2d(np.asarray(points, dtype=float))))

    @property
    def m(self):
        return len(self.points)

    def permuted(self, order):
        return Configuration(self.points[list(order)])


def check_admissible(data, config, k_min=0.0):
    """Distinct points, none on a source, k(ξ_j) > k_min."""
    s = data.surface
    for i, j in itertools.combinations(range(config.m), 2):
        if s.distance(config.points[i], config.points[j]) < POINT_SEPARATION:
            raise InadmissibleError(f"points {i} and {j} closer than {POINT_SEPARATION}")
    k = potential_k(data, config.points)
    if np.any(k <= k_min):
        raise InadmissibleError(f"k(ξ_j) = {float(np.min(k)):.3g} not above {k_min}")


# ── k and ρ_j ─────────────────────────────────────────────────────────────

def log_k(data, x, check=True):
    x = np.asarray(x, dtype=float)
    val = np.log(data.h.value(data.surface, x))
    for p, n in data.sources:
        if check and np.any(data.surface.distance(x, p) < _SOURCE_HIT):
            raise SingularPotentialError("k evaluated at a source point, where it vanishes")
        with np.errstate(divide="ignore", invalid="ignore"):
            val = val - FOUR_PI * n * data.green.green(x, p, check=False)
    return val


def potential_k(data, x):
    """k(x) = h(x)·e^{−4πΣ n_j G(x, p_j)}."""
    return np.exp(log_k(data, x))


def grad_log_k(data, x):
    x = np.asarray(x, dtype=float)
    s = data.surface
    g = data.h.grad(s, x) / data.h.value(s, x)[..., None]
    for p, n in data.sources:
        g = g - FOUR_PI * n * data.green.green_grad(x, p)
    return g


def laplacian_log_k(data, x):
    """Δ_g log k away from the sources."""
    x = np.asarray(x, dtype=float)
    s = data.surface
    h = data.h.value(s, x)
    gh = data.h.grad(s, x)
    return (data.h.laplacian(s, x) / h - np.sum(gh * gh, axis=-1) / h**2
            - FOUR_PI * data.N / s.area)


def log_rho(data, config, j, x):
    x = np.asarray(x, dtype=float)
    val = log_k(data, x, check=False) + EIGHT_PI * data.green.regular_part(x, config.points[j])
    for l, xi in enumerate(config.points):
        if l != j:
            val = val + EIGHT_PI * data.green.green(x, xi)
    return val


def rho_j(data, config, j, x):
    """ρ_j(x) = k(x)·e^{8πH(x,ξ_j) + 8πΣ_{l≠j}G(x,ξ_l)}."""
    with np.errstate(divide="ignore"):
        return np.exp(log_rho(data, config, j, x))


def grad_log_rho(data, config, j, x):
    g = grad_log_k(data, x) + EIGHT_PI * data.green.regular_grad(x, config.points[j])
    for l, xi in enumerate(config.points):
        if l != j:
            g = g + EIGHT_PI * data.green.green_grad(x, xi)
    return g


# ── φ_m and its derivatives ───────────────────────────────────────────────

def phi_m(data, config):
    """(1/4π)Σ log k(ξ_j) + Σ H(ξ_j,ξ_j) + Σ_{l≠j} G(ξ_l,ξ_j)."""
    check_admissible(data, config)
    pts = config.points
    val = float(np.sum(log_k(data, pts))) / FOUR_PI
    val += sum(float(data.green.robin(xi)) for xi in pts)
    for i, j in itertools.combinations(range(config.m), 2):
        val += 2.0 * float(data.green.green(pts[i], pts[j]))
    return val


def _ambient_grad(data, points):
    """∂φ_m/∂ξ_j as tangent vectors, shape (m, d)."""
    out = []
    for j, xi in enumerate(points):
        g = grad_log_k(data, xi) / FOUR_PI + 2.0 * data.green.regular_grad(xi, xi)
        for l, other in enumerate(points):
            if l != j:
                g = g + 2.0 * data.green.green_grad(xi, other)
        out.append(g)
    return np.array(out)


def _charts(data, points):
    s = data.surface
    r0 = min(s.default_r0, s.injectivity_bound)
    return [chart_at(s, xi, r0) for xi in points]


def _chart_gradient(data, charts, Y):
    """Gradient of φ_m ∘ (from_chart_1, …, from_chart_m) at chart coordinates Y (m, 2)."""
    pts = np.array([c.from_chart(y) for c, y in zip(charts, Y)])
    amb = _ambient_grad(data, pts)
    return np.concatenate([c.jacobian(y).T @ g for c, y, g in zip(charts, Y, amb)])


def grad_phi_m(data, config):
    check_admissible(data, config)
    charts = _charts(data, config.points)
    return _chart_gradient(data, charts, np.zeros((config.m, 2)))


def _chart_hessian(data, charts, Y, step=1e-5):
    n = Y.size
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        gp = _chart_gradient(data, charts, Y + e.reshape(Y.shape))
        gm = _chart_gradient(data, charts, Y - e.reshape(Y.shape))
        H[:, i] = (gp - gm) / (2 * step)
    return 0.5 * (H + H.T)


def hessian_phi_m(data, config, step=1e-5):
    """Central differences of the analytic chart gradient, symmetrised."""
    check_admissible(data, config)
    return _chart_hessian(data, _charts(data, config.points), np.zeros((config.m, 2)), step)


def classify(eigenvalues):
    eig = np.asarray(eigenvalues, dtype=float)
    radius = float(np.max(np.abs(eig)))
    if radius == 0.0 or float(np.min(np.abs(eig))) < DEGENERACY_RATIO * radius:
        return "degenerate"
    if np.all(eig > 0):
        return "min"
    if np.all(eig < 0):
        return "max"
    return "saddle"


def local_degree(data, config, radius=1e-3, n_angle=64):
    """Local Brouwer degree of ∇φ_m at an isolated critical point.

    m = 1: winding number of the chart gradient on a circle of the given radius.
    m > 1: sign of the Hessian determinant (0 when degenerate).
    """
    if config.m == 1:
        charts = _charts(data, config.points)
        t = 2 * math.pi * np.arange(n_angle) / n_angle
        ang = []
        for a in t:
            g = _chart_gradient(data, charts, radius * np.array([[math.cos(a), math.sin(a)]]))
            ang.append(math.atan2(g[1], g[0]))
        ang = np.unwrap(np.append(ang, ang[0]))
        return int(round((ang[-1] - ang[0]) / (2 * math.pi)))
    H = hessian_phi_m(data, config)
    eig = np.linalg.eigvalsh(H)
    if classify(eig) == "degenerate":
        return 0
    return int(np.sign(np.prod(eig)))


# ── A(ξ) ──────────────────────────────────────────────────────────────────

def _circular_means(f, radii, n_angle=_MEAN_ANGLES):
    t = 2 * math.pi * (np.arange(n_angle) + 0.5) / n_angle
    r = np.asarray(radii, dtype=float)
    y = np.stack([r[:, None] * np.cos(t)[None, :], r[:, None] * np.sin(t)[None, :]], axis=-1)
    return np.mean(f(y), axis=-1)


def _chart_density(data, config, j, chart):
    """y ↦ e^{φ̂(y)}·|y|⁴·k·e^{8πΣ_l G(·,ξ_l)}, smooth through y = 0 where it equals ρ_j(ξ_j)."""
    xi = config.points[j]
    others = [p for l, p in enumerate(config.points) if l != j]

    def f(y):
        x = chart.from_chart(y)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            expo = (log_k(data, x, check=False) + EIGHT_PI * data.green.near_regular(x, xi)
                    + chart.conformal_factor(y))
            for p in others:
                expo = expo + EIGHT_PI * data.green.green(x, p, check=False)
            return np.exp(expo)

    return f


def _separation(data, config):
    """Smallest distance from any ξ_j to another ξ_l or to a source."""
    s = data.surface
    d = math.inf
    for j, xi in enumerate(config.points):
        for l, other in enumerate(config.points):
            if l != j:
                d = min(d, float(s.distance(xi, other)))
        for p, _ in data.sources:
            d = min(d, float(s.distance(xi, p)))
    return d


def laplacian_terms(data, config):
    """(ρ_j(ξ_j), Δ_gρ_j(ξ_j) − 2K(ξ_j)ρ_j(ξ_j)) per point, from the closed-form rewrite."""
    check_admissible(data, config)
    s = data.surface
    rho = np.empty(config.m)
    lap = np.empty(config.m)
    for j, xi in enumerate(config.points):
        rho[j] = float(rho_j(data, config, j, xi))
        g = grad_log_rho(data, config, j, xi)
        K = float(s.curvature(xi))
        bracket = (float(laplacian_log_k(data, xi)) + EIGHT_PI * config.m / s.area
                   + float(g @ g) - 2 * K)
        lap[j] = rho[j] * bracket
    return rho, lap


def chart_laplacians(data, config, h=None):
    """Δ_y(e^{φ̂}ρ_j)(0) from Richardson-fitted circular means in each chart."""
    charts = _charts(data, config.points)
    if h is None:
        h = 0.005 * min(charts[0].r0, _separation(data, config))
    radii = h * np.arange(1, 5)
    out = np.empty(config.m)
    for j, chart in enumerate(charts):
        f = _chart_density(data, config, j, chart)
        f0 = float(f(np.zeros(2)))
        means = _circular_means(f, radii, 16) - f0
        # f̄(r) − f(0) = (Δf/4)r² + b r⁴ + c r⁶
        V = np.stack([radii**2, radii**4, radii**6], axis=1)
        coef, *_ = np.linalg.lstsq(V, means, rcond=None)
        out[j] = 4.0 * coef[0]
    return out


def coeff_A(data, config):
    """A(ξ) = 4πΣ[Δ_gρ_j − 2Kρ_j](ξ_j), cross-checked between both representations."""
    _, lap = laplacian_terms(data, config)
    A = FOUR_PI * float(np.sum(lap))
    A_chart = FOUR_PI * float(np.sum(chart_laplacians(data, config)))
    if abs(A - A_chart) > A_CHECK_TOL * (1 + abs(A)):
        raise InconsistencyError(
            f"A from the closed form ({A:.10g}) and from chart differences ({A_chart:.10g}) disagree")
    return A


def flat_torus_identity(data, config):
    """(A, (4π)³Σρ_j|∇_{ξ_j}φ_m|²); the two agree on a flat torus with N = 2m."""
    if not data.surface.is_torus:
        raise UnsupportedSurfaceError("the A-identity holds on flat tori")
    rho, _ = laplacian_terms(data, config)
    grads = _ambient_grad(data, config.points)
    rhs = FOUR_PI**3 * float(np.sum(rho * np.sum(grads * grads, axis=-1)))
    return coeff_A(data, config), rhs


# ── B(ξ) ──────────────────────────────────────────────────────────────────

def _panel_rule(edges, order=_PANEL_ORDER):
    x, w = leggauss(order)
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        if b > a:
            nodes.append(0.5 * (b - a) * x + 0.5 * (a + b))
            weights.append(0.5 * (b - a) * w)
    return np.concatenate(nodes), np.concatenate(weights)


def _uniform_edges(a, b, panels):
    return list(np.linspace(a, b, panels + 1))


class BIntegrator:
    """Evaluates B(ξ) for one configuration in several equivalent ways.

    The exterior integral of F = k·e^{8πΣG(·,ξ_l)} is split with a fixed C^∞
    partition (≡1 on B_{r_b}(ξ_j), ≡0 outside B_{2r_b}): the grid carries
    F·(1 − Σb_j) once, while everything r- or χ-dependent is a one-dimensional
    radial integral of circular means of f_j(y) = e^{φ̂}|y|⁴F in the chart at ξ_j.
    """

    def __init__(self, data, config, grid=None, n=256):
        check_admissible(data, config)
        self.data, self.config = data, config
        s = data.surface
        self.grid = grid if grid is not None else make_grid(s, n)
        self.r0 = float(data.green.cutoff.r0)
        self.charts = _charts(data, config.points)
        rough = data.rough_sources
        centers = list(config.points) + rough
        dmin = math.inf
        for a, b in itertools.combinations(centers, 2):
            dmin = min(dmin, float(s.distance(a, b)))
        self.separation = dmin
        self.r_b = min(self.charts[0].r0, dmin / 4)
        self.quad = HybridQuadrature(self.grid, centers, self.r_b, 2 * self.r_b,
                                     scales=[self.r_b] * config.m + [1e-3] * len(rough))
        self.densities = [_chart_density(data, config, j, c) for j, c in enumerate(self.charts)]
        self.rho, self.lap = laplacian_terms(data, config)
        self.A = FOUR_PI * float(np.sum(self.lap))
        self._grid_part = None
        logger.debug("BIntegrator: m=%d r_b=%.4g rough=%d", config.m, self.r_b, len(rough))

    def _F(self, x):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            expo = log_k(self.data, x, check=False)
            for xi in self.config.points:
                expo = expo + EIGHT_PI * self.data.green.green(x, xi, check=False)
            return np.exp(expo)

    @property
    def grid_part(self):
        """∫ F·(1 − Σ_j b_j), including the polar patches at rough sources."""
        if self._grid_part is None:
            m = self.config.m
            patches = set(range(m, m + len(self.data.rough_sources)))
            self._grid_part = float(self.quad.integrate(self._F, patches=patches))
        return self._grid_part

    def _radial(self, j, nodes, weights, weight_fn):
        """Σ_j-term ∫ f_j(y)·w(|y|)/|y|⁴ dy over the radii given by (nodes, weights)."""
        fbar = _circular_means(self.densities[j], nodes)
        return 2 * math.pi * float(np.sum(weights * fbar * weight_fn(nodes) / nodes**3))

    def _regularized(self, j, r):
        """∫_{B_r} (f_j − P₂f_j)/|y|⁴ dy = 2π∫₀^r [f̄_j − f_j(0) − ρ²Δf_j/4]/ρ³ dρ."""
        f0, lap = self.rho[j], self.lap[j]

        def g(rr):
            return (_circular_means(self.densities[j], rr) - f0 - 0.25 * lap * rr**2) / rr**3

        rc = r / 8
        nodes, weights = _panel_rule([rc, 2 * rc, 4 * rc, r])
        total = float(np.sum(weights * g(nodes)))
        # g is odd and smooth; fit ρ(c₁ + c₃ρ² + c₅ρ⁴ + c₇ρ⁶) on the first panel
        first = nodes < 2 * rc
        rr = nodes[first]
        V = np.stack([rr, rr**3, rr**5, rr**7], axis=1)
        coef, *_ = np.linalg.lstsq(V, g(rr), rcond=None)
        total += float(sum(c * rc ** (p + 1) / (p + 1) for c, p in zip(coef, (1, 3, 5, 7))))
        return 2 * math.pi * total

    def _head(self):
        """−2πΣ[Δρ_j − 2Kρ_j] log ρ_j(ξ_j) − A/2."""
        return -2 * math.pi * float(np.sum(self.lap * np.log(self.rho))) - 0.5 * self.A

    def sharp(self, r=None):
        """B with the exterior region S ∖ ∪B_r(ξ_j)."""
        r = self.r0 if r is None else float(r)
        if not 0 < r <= self.r0 + 1e-15:
            raise DomainError(f"r={r:.6g} outside (0, r0={self.r0:.6g}]")
        if r > 0.5 * self.separation:
            raise DomainError(f"r={r:.6g} reaches past half the distance to the nearest other centre")
        rb = self.r_b
        inner_edge = min(r, rb)
        exterior = self.grid_part
        interior = 0.0
        bump = lambda t: partition_bump(t, rb, 2 * rb)
        edges = [inner_edge]
        while edges[-1] * 2 < rb:
            edges.append(edges[-1] * 2)
        edges += _uniform_edges(rb, 2 * rb, 4)
        nodes, weights = _panel_rule(edges)
        for j in range(self.config.m):
            exterior += self._radial(j, nodes, weights, bump)
            if r > rb:
                rn, rw = graded_radii(r, 0.0, r_inner=rb, order=_PANEL_ORDER)
                exterior -= self._radial(j, rn, rw, np.ones_like)
            interior += self._regularized(j, r)
        counter = -EIGHT_PI * float(np.sum(self.rho)) / r**2 + self.A * math.log(r)
        return self._head() + 8 * exterior + 8 * interior + counter

    def smooth(self, profile="quintic"):
        """B with the excision replaced by a radial cutoff χ supported in B_{r_b}."""
        rb = self.r_b
        rc = rb / 2
        chi = cutoff_profile(profile, rc)
        bump = lambda t: partition_bump(t, rb, 2 * rb)
        nodes, weights = _panel_rule(_uniform_edges(rc, rb, 4) + _uniform_edges(rb, 2 * rb, 4)[1:])
        tn, tw = _panel_rule(_uniform_edges(rc, rb, 4))
        _, dchi, _ = chi.derivatives(tn)
        exterior = self.grid_part
        interior = 0.0
        corr = 0.0
        for j in range(self.config.m):
            exterior += self._radial(j, nodes, weights, lambda t: bump(t) - chi.chi(t))
            f0, lap = self.rho[j], self.lap[j]
            g = (_circular_means(self.densities[j], tn) - f0 - 0.25 * lap * tn**2) / tn**3
            interior += self._regularized(j, rc) + 2 * math.pi * float(np.sum(tw * chi.chi(tn) * g))
            corr += EIGHT_PI * f0 * float(np.sum(tw * dchi / tn**2))
            corr -= FOUR_PI * lap * float(np.sum(tw * dchi * np.log(tn)))
        return self._head() + 8 * exterior + 8 * interior + corr


def coeff_B(data, config, r=None, grid=None, n=256):
    """B(ξ) through the sharp excision at radius r ∈ (0, r₀] (default r₀)."""
    return BIntegrator(data, config, grid, n).sharp(r)


def coeff_Btilde(data, config):
    """B̃ = (32π/3)Σ 1/ρ_j(ξ_j) (flat torus)."""
    if not data.surface.is_torus:
        raise UnsupportedSurfaceError("B̃ is defined for the Chern–Simons model on a flat torus")
    check_admissible(data, config)
    rho = [float(rho_j(data, config, j, xi)) for j, xi in enumerate(config.points)]
    return 32 * math.pi / 3 * sum(1.0 / r for r in rho)


# ── reports ───────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class CoefficientReport:
    config: Configuration
    phi: float
    grad: np.ndarray
    hessian: np.ndarray
    eigenvalues: np.ndarray
    classification: str
    A: float
    B: float = None
    Btilde: float = None
    rho: tuple = ()

    def row(self):
        """Flat dict for tables."""
        out = {"m": self.config.m, "type": self.classification, "phi": self.phi,
               "grad_norm": float(np.linalg.norm(self.grad)), "A": self.A, "B": self.B,
               "Btilde": self.Btilde}
        for j, p in enumerate(self.config.points):
            for c, v in enumerate(p):
                out[f"xi{j + 1}_{c}"] = float(v)
        return out


def evaluate_config(data, config, grid=None, r=None, with_B=True):
    hess = hessian_phi_m(data, config)
    eig = np.linalg.eigvalsh(hess)
    B = coeff_B(data, config, r, grid) if with_B else None
    Bt = coeff_Btilde(data, config) if data.surface.is_torus else None
    rho = tuple(float(rho_j(data, config, j, xi)) for j, xi in enumerate(config.points))
    return CoefficientReport(config, phi_m(data, config), grad_phi_m(data, config), hess, eig,
                             classify(eig), coeff_A(data, config), B, Bt, rho)


# ── critical-point search ─────────────────────────────────────────────────

def _start_points(surface, m, budget, seed):
    sobol = qmc.Sobol(d=2 * m, scramble=True, seed=seed)
    u = sobol.random_base2(max(0, math.ceil(math.log2(max(budget, 1)))))[:budget]
    u = u.reshape(len(u), m, 2)
    if surface.is_torus:
        return u @ surface.basis
    z = 2 * u[..., 0] - 1
    lon = 2 * math.pi * u[..., 1]
    rad = np.sqrt(1 - z * z)
    return np.stack([rad * np.cos(lon), rad * np.sin(lon), z], axis=-1)


def _refine(data, start, tol):
    charts = _charts(data, start)

    def residual(v):
        g = _chart_gradient(data, charts, v.reshape(-1, 2))
        return np.where(np.isfinite(g), g, 1e6)

    def jac(v):
        return _chart_hessian(data, charts, v.reshape(-1, 2))

    sol = least_squares(residual, np.zeros(2 * len(start)), jac=jac, method="lm",
                        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=200)
    pts = np.array([c.from_chart(y) for c, y in zip(charts, sol.x.reshape(-1, 2))])
    config = Configuration.on(data.surface, pts)
    check_admissible(data, config)
    # Newton polish in charts centred at the solution
    for _ in range(3):
        charts = _charts(data, config.points)
        Y = np.zeros((config.m, 2))
        g = _chart_gradient(data, charts, Y)
        if np.linalg.norm(g) < 1e-13:
            break
        step = np.linalg.solve(_chart_hessian(data, charts, Y), -g)
        pts = np.array([c.from_chart(y) for c, y in zip(charts, step.reshape(-1, 2))])
        config = Configuration.on(data.surface, pts)
    g = grad_phi_m(data, config)
    if not np.linalg.norm(g) < tol:
        return None
    return config


def same_configuration(surface, a, b, tol=DEDUP_DISTANCE):
    """True when b is a permutation of a up to tol."""
    if a.m != b.m:
        return False
    for order in itertools.permutations(range(a.m)):
        if np.max(surface.distance(a.points, b.points[list(order)])) < tol:
            return True
    return False


def find_critical_points(data, m, budget=64, seed=0, tol=1e-8, grid=None, with_B=True):
    """Multistart search for critical points of φ_m with classification and coefficients.

    Returns a list of (Configuration, CoefficientReport), one per permutation class.
    """
    if m < 1:
        raise DomainError(f"m must be ≥ 1, got {m}")
    found = []
    for start in _start_points(data.surface, m, budget, seed):
        try:
            config = _refine(data, start, tol)
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
            logger.debug("start discarded: %s", e)
            continue
        if config is None:
            continue
        if any(same_configuration(data.surface, config, c) for c in found):
            continue
        found.append(config)
    logger.info("critical points of φ_%d: %d distinct from %d starts", m, len(found), budget)
    out = [(c, evaluate_config(data, c, grid, with_B=with_B)) for c in found]
    out.sort(key=lambda item: (item[1].classification, item[1].phi))
    return out


def phi_1_map(data, n=128):
    """φ_1 sampled on an n×n grid of the fundamental cell (or lon × lat on the sphere).

    Returns (points (n, n, d), values (n, n)); values are −inf at sources.
    """
    s = data.surface
    if s.is_torus:
        t = (np.arange(n) + 0.5) / n
        U, V = np.meshgrid(t, t, indexing="ij")
        pts = np.stack([U, V], axis=-1) @ s.basis
    else:
        lon = 2 * math.pi * (np.arange(n) + 0.5) / n
        lat = math.pi * ((np.arange(n) + 0.5) / n - 0.5)
        L, P = np.meshgrid(lon, lat, indexing="ij")
        pts = np.stack([np.cos(P) * np.cos(L), np.cos(P) * np.sin(L), np.sin(P)], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = log_k(data, pts, check=False) / FOUR_PI + data.green.robin()
    return pts, vals


# ── existence diagnostics ─────────────────────────────────────────────────

def existence_side(A, B, a_tol=0.0):
    """Side of 8πm on which a concentrating family exists: 'right', 'left' or None."""
    if A > a_tol:
        return "right"
    if A < -a_tol:
        return "left"
    if B is not None and B > 0:
        return "right"
    if B is not None and B < 0:
        return "left"
    return None


def minimum_branch_window(data, grid=None, n=128):
    """(inf, sup) of |S|/(8π)[2K − Δ_g log k] for k > 0.

    Minimum-set families exist for integers 1 ≤ m < inf and for m > sup.
    """
    if data.sources:
        raise DomainError("the minimum-branch window needs k > 0 (no sources)")
    s = data.surface
    grid = grid if grid is not None else make_grid(s, n)
    x = grid.points
    q = s.area / EIGHT_PI * (2 * s.curvature(x) - laplacian_log_k(data, x))
    return float(np.min(q)), float(np.max(q))


def sphere_minmax_condition(data, m):
    """Min-max existence condition on the sphere as a diagnostic dict.

    holds: l ≥ 2, m − 1 − n_j is not a non-negative integer for every j, and
    #J ≥ 2 with J = {j : m < 1 + n_j}. `A_sign` is the sign of −N + 2m − 2,
    which fixes the sign of A at the min-max point when h ≡ 1.
    """
    if data.surface.is_torus:
        raise UnsupportedSurfaceError("the min-max condition is stated on the sphere")
    ns = [n for _, n in data.sources]
    J = [j for j, n in enumerate(ns) if m < 1 + n]
    resonant = []
    for j, n in enumerate(ns):
        d = m - 1 - n
        if d >= -1e-12 and abs(d - round(d)) < 1e-12:
            resonant.append(j)
    holds = len(ns) >= 2 and not resonant and len(J) >= 2
    return {"holds": holds, "J": J, "resonant": resonant,
            "A_sign": int(np.sign(-sum(ns) + 2 * m - 2))}
