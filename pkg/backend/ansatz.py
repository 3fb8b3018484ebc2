# backend/ansatz.py
"""Multi-bubble ansatz on the flat torus.

Bubbles U_j, their projections PU_j, the ansatz W = Σ PU_j, kernel elements
PZ_ij / PZ, the residual R, the weighted ∗-norm, the linearized operator L and
the projected correction φ(δ, ξ).

Every projection is stored as χ·f (analytic in the chart) plus a smooth
remainder ψ solved spectrally on the grid and evaluated off-grid with a
periodic spline, so integrals of peaked integrands go through the hybrid
grid + graded-polar quadrature.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigsh, lsmr, minres

from backend.errors import (
    DiscretizationError, DomainError, NonConvergenceError, UnsupportedSurfaceError,
    ZeroMeanError,
)
from backend.landscape import (
    EIGHT_PI, Configuration, SingularData, check_admissible, log_k, rho_j,
)
from backend.quadrature import HybridQuadrature
from backend.surface import (
    Field, PeriodicInterpolant, cutoff_profile, integrate, integrate_radial, laplacian,
    make_grid, patch_radii, poisson_solve, polar_product, spectral_multiply,
)

logger = logging.getLogger(__name__)

FOUR_PI = 4 * math.pi
DEFAULT_SIGMA = 0.5
DEFAULT_DELTA_MAX = 0.1
WINDOW_C = 10.0             # |λ − 8πm| ≤ C δ²|log δ|
SOURCE_TOL = 1e-3          # grid mean of a transition source, relative to its sup
FIXED_POINT_TOL = 1e-10
FIXED_POINT_MAX_ITER = 50
LINEAR_TOL = 1e-8
LSMR_MAX_ITER = 10000


# ── radial profiles ───────────────────────────────────────────────────────

def bubble_profile(delta, r):
    """log 8δ²/(δ² + r²)², the radial Liouville bubble."""
    r = np.asarray(r, dtype=float)
    return np.log(8 * delta**2) - 2 * np.log(delta**2 + r * r)


def liouville_kernel(y):
    """(Y₀, Y₁, Y₂) at y, shape (..., 3)."""
    y = np.asarray(y, dtype=float)
    s = np.sum(y * y, axis=-1)
    return np.stack([2 * (1 - s) / (1 + s), 4 * y[..., 0] / (1 + s), 4 * y[..., 1] / (1 + s)],
                    axis=-1)


def kernel_normalization(r_max=1e3):
    """∫_{ℝ²} dy/(1+|y|²)³ (= π/2) by graded radial quadrature; tail below 2e-12."""
    return integrate_radial(lambda r: (1 + r * r) ** -3, r_max, 1.0)


@dataclass(frozen=True)
class _Localized:
    """f, ∇f and Δf of a chart function centred at the origin."""

    value: object
    grad: object
    lap: object


def _bubble_hat(d):
    d2 = d * d

    def value(y):
        return -2 * np.log(d2 + np.sum(y * y, axis=-1))

    def grad(y):
        return -4 * y / (d2 + np.sum(y * y, axis=-1))[..., None]

    def lap(y):
        return -8 * d2 / (d2 + np.sum(y * y, axis=-1)) ** 2

    return _Localized(value, grad, lap)


def _radial_kernel(d):
    d2 = d * d

    def value(y):
        s = np.sum(y * y, axis=-1)
        return 2 * (d2 - s) / (d2 + s)

    def grad(y):
        s = np.sum(y * y, axis=-1)
        return -8 * d2 * y / ((d2 + s) ** 2)[..., None]

    def lap(y):
        s = np.sum(y * y, axis=-1)
        return -8 * d2 / (d2 + s) ** 2 * value(y)

    return _Localized(value, grad, lap)


def _dipole_kernel(d, i):
    d2 = d * d
    e = np.eye(2)[i]

    def value(y):
        return 4 * d * y[..., i] / (d2 + np.sum(y * y, axis=-1))

    def grad(y):
        s = (d2 + np.sum(y * y, axis=-1))[..., None]
        return 4 * d * (e / s - 2 * y[..., i, None] * y / s**2)

    def lap(y):
        s = np.sum(y * y, axis=-1)
        return -8 * d2 / (d2 + s) ** 2 * value(y)

    return _Localized(value, grad, lap)


# ── parameters ────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class BubbleParams:
    """Global dilation δ, the configuration ξ and the cutoff χ (radius r₀, profile).

    δ_j² = δ²ρ_j(ξ_j). Projections need the spectral Poisson solver, so the
    surface must be a flat torus.
    """

    data: SingularData
    config: Configuration
    delta: float
    r0: float = None
    profile: str = "quintic"
    grid: object = None
    n: int = 128

    def __post_init__(self):
        s = self.data.surface
        if not s.is_torus:
            raise UnsupportedSurfaceError("the ansatz is built on the flat torus only")
        if not self.delta > 0:
            raise DomainError(f"δ must be positive, got {self.delta}")
        r0 = s.default_r0 if self.r0 is None else float(self.r0)
        if not 0 < r0 <= s.injectivity_bound + 1e-15:
            raise DomainError(f"r0={r0:.6g} outside (0, {s.injectivity_bound:.6g}]")
        object.__setattr__(self, "r0", r0)
        object.__setattr__(self, "delta", float(self.delta))
        check_admissible(self.data, self.config)
        if self.grid is None:
            object.__setattr__(self, "grid", make_grid(s, self.n))

    @property
    def surface(self):
        return self.data.surface

    @property
    def m(self):
        return self.config.m

    @cached_property
    def chi(self):
        return cutoff_profile(self.profile, self.r0)

    @cached_property
    def rho(self):
        return np.array([float(rho_j(self.data, self.config, j, xi))
                         for j, xi in enumerate(self.config.points)])

    @cached_property
    def deltas(self):
        return self.delta * np.sqrt(self.rho)

    def with_delta(self, delta):
        return BubbleParams(self.data, self.config, delta, self.r0, self.profile, self.grid)

    def with_config(self, config):
        return BubbleParams(self.data, config, self.delta, self.r0, self.profile, self.grid)

    @cached_property
    def centers(self):
        """Bubble centres followed by the rough sources (finitely smooth k)."""
        return [np.asarray(p) for p in self.config.points] + list(self.data.rough_sources)

    @cached_property
    def quadrature(self):
        s = self.surface
        pts = self.centers
        sep = min((s.distance(a, b) for i, a in enumerate(pts) for b in pts[:i]),
                  default=math.inf)
        r_out = min(0.4 * s.shortest_period, 0.45 * sep)
        r_in = 0.2 * r_out
        scales = list(self.deltas) + [r_in] * (len(pts) - self.m)
        return HybridQuadrature(self.grid, pts, r_in, r_out, scales)


def lambda_window(params, lam, C=WINDOW_C):
    """True when |λ − 8πm| ≤ C δ²|log δ|; logs a warning otherwise."""
    d = params.delta
    ok = abs(lam - EIGHT_PI * params.m) <= C * d * d * abs(math.log(d))
    if not ok:
        logger.warning("λ=%.8g outside the window |λ − 8π·%d| ≤ %.3g·δ²|log δ| at δ=%.4g",
                       lam, params.m, C, d)
    return ok


# ── projections ───────────────────────────────────────────────────────────

class Projection:
    """P f: zero-mean solution of −ΔPf = −χΔf + (1/|S|)∫χΔf, for f centred at ξ.

    Stored as χ·f + ψ, with −Δψ = 2∇χ·∇f + (Δχ)f + (1/|S|)∫χΔf.

    `split = (g, regular, mass)` writes f = s + g for a singular s whose
    projection is known: Ps = χs + regular(x) and ∫χΔs = mass. Only the
    transition source of g then goes through the grid.
    """

    def __init__(self, grid, chi, center, fn, scale, split=None):
        surface = grid.surface
        self.grid, self.chi, self.fn = grid, chi, fn
        self.center = np.asarray(center, dtype=float)
        self.scale = float(scale)

        y, w = polar_product(*patch_radii(chi.r0, 2 * chi.r0, self.scale))
        c = chi.chi(np.linalg.norm(y, axis=-1))
        self._polar_y = y
        self._polar_lap_w = w * c * fn.lap(y)
        self.lap_mean = float(np.sum(self._polar_lap_w)) / surface.area
        self.cut_integral = float(np.sum(w * c * fn.value(y)))

        self._regular = None
        src_fn, shift, cut = fn, self.lap_mean, self.cut_integral
        if split is not None:
            src_fn, self._regular, mass = split
            shift = self.lap_mean - mass / surface.area
            cut = float(np.sum(w * c * src_fn.value(y)))

        src = self._source(surface.displacement(grid.points, self.center), src_fn, shift)
        defect = float(np.mean(src))
        logger.debug("projection source mean %.3e (sup %.3e)", defect, float(np.max(np.abs(src))))
        if abs(defect) > SOURCE_TOL * max(1.0, float(np.max(np.abs(src)))):
            raise DiscretizationError(
                f"projection source has mean {defect:.3e}; the grid does not resolve the cutoff")
        rest = poisson_solve(grid, src - defect) - cut / surface.area
        self._rest_at = PeriodicInterpolant(rest)
        self.psi = rest if self._regular is None else rest + self._regular(grid.points)

    def _source(self, y, fn, shift):
        r = np.linalg.norm(y, axis=-1)
        _, d1, d2 = self.chi.derivatives(r)
        safe = np.where(r > 0, r, 1.0)
        radial = np.sum(y * fn.grad(y), axis=-1) / safe
        lap_chi = d2 + np.where(r > 0, d1 / safe, 0.0)
        return 2 * d1 * radial + lap_chi * fn.value(y) + shift

    def _chart(self, x):
        return self.grid.surface.displacement(np.asarray(x, dtype=float), self.center)

    def localized(self, x):
        """χ·f at x."""
        y = self._chart(x)
        return self.chi.chi(np.linalg.norm(y, axis=-1)) * self.fn.value(y)

    def __call__(self, x):
        out = self.localized(x) + self._rest_at(x)
        if self._regular is not None:
            out = out + self._regular(x)
        return out

    def lap(self, x):
        """ΔPf at x."""
        y = self._chart(x)
        return self.chi.chi(np.linalg.norm(y, axis=-1)) * self.fn.lap(y) - self.lap_mean

    @cached_property
    def field(self):
        return self.psi + self.localized(self.grid.points)

    @cached_property
    def lap_field(self):
        return Field(self.grid, self.lap(self.grid.points))

    def pair(self, g):
        """∫ (χΔf)·g over the cutoff disk; g takes ambient points."""
        return float(np.sum(self._polar_lap_w * g(self.center + self._polar_y)))


def _bubble_remainder(d):
    """Û + 4log|y| = −2log(1 + δ²/|y|²); the centre value is never weighted."""
    d2 = d * d

    def value(y):
        s = np.sum(y * y, axis=-1)
        return np.where(s > 0, -2 * np.log1p(d2 / np.where(s > 0, s, 1.0)), 0.0)

    def grad(y):
        s = np.sum(y * y, axis=-1)
        safe = np.where(s > 0, s, 1.0)
        return 4 * d2 * y / (safe * (d2 + safe))[..., None]

    def lap(y):
        return -8 * d2 / (d2 + np.sum(y * y, axis=-1)) ** 2

    return _Localized(value, grad, lap)


def cut_regular_part(green, chi, center):
    """x ↦ G(x,ξ) + (1/2π)χ(|y|)log|y|, finite at x = ξ."""
    surface = green.surface

    def regular(x):
        r = np.linalg.norm(surface.displacement(x, center), axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            tail = np.where(r > 0.5 * chi.r0,
                            (chi.chi(r) - 1.0) * np.log(np.where(r > 0, r, 1.0)), 0.0)
        return green.near_regular(x, center) + tail / (2 * math.pi)

    return regular


class ProjectedBubble(Projection):
    """PU_j = χÛ_j + ψ_j with Û_j = −2log(δ_j² + |y|²).

    With a Green evaluator, the −4log|y| part projects to 8πG exactly and the
    grid only carries the O(δ²) remainder.
    """

    def __init__(self, grid, chi, center, delta_j, green=None):
        self.delta_j = float(delta_j)
        split = None
        if green is not None:
            h = cut_regular_part(green, chi, np.asarray(center, dtype=float))
            split = (_bubble_remainder(self.delta_j), lambda x: EIGHT_PI * h(x), -EIGHT_PI)
        super().__init__(grid, chi, center, _bubble_hat(self.delta_j), self.delta_j, split)

    @property
    def c(self):
        """(1/|S|)∫χe^{U}."""
        return -self.lap_mean

    def U(self, x):
        r = np.linalg.norm(self._chart(x), axis=-1)
        return bubble_profile(self.delta_j, r)

    def cut_mass_exact(self):
        """∫χe^{U} = 8π + 8πδ²∫χ′/(δ²+t²)dt (exact radial identity)."""
        t, w = self.chi.transition()
        _, d1, _ = self.chi.derivatives(t)
        d2 = self.delta_j**2
        return EIGHT_PI + EIGHT_PI * d2 * float(np.sum(w * d1 / (d2 + t * t)))


def bubble_U(params, j):
    """U_j on the grid (the uncut bubble in the chart at ξ_j)."""
    y = params.surface.displacement(params.grid.points, params.config.points[j])
    return Field(params.grid, bubble_profile(params.deltas[j], np.linalg.norm(y, axis=-1)))


def project_bubble(params, j):
    return ProjectedBubble(params.grid, params.chi, params.config.points[j], params.deltas[j],
                           params.data.green)


# ── the expansion of PU ───────────────────────────────────────────────────

def alpha_constant(params, j):
    """α = −(4π/|S|)δ_j²log δ_j + (2δ_j²/|S|)(π − 2π∫χ′(t)log t dt)."""
    d = params.deltas[j]
    area = params.surface.area
    t, w = params.chi.transition()
    _, d1, _ = params.chi.derivatives(t)
    return (-FOUR_PI / area * d * d * math.log(d)
            + 2 * d * d / area * (math.pi - 2 * math.pi * float(np.sum(w * d1 * np.log(t)))))


def solve_F(params, j):
    """Zero-mean F with −ΔF = Δχ/r² − 4χ′/r³ + (4π/|S|)∫χ′/t² dt."""
    grid, r0 = params.grid, params.r0
    y = params.surface.displacement(grid.points, params.config.points[j])
    r = np.linalg.norm(y, axis=-1)
    _, d1, d2 = params.chi.derivatives(r)
    inside = r > 0.5 * r0
    safe = np.where(inside, r, 1.0)
    src = np.where(inside, (d2 + d1 / safe) / safe**2 - 4 * d1 / safe**3, 0.0)
    t, w = params.chi.transition()
    _, c1, _ = params.chi.derivatives(t)
    src = src + FOUR_PI / params.surface.area * float(np.sum(w * c1 / t**2))
    defect = float(np.mean(src))
    if abs(defect) > SOURCE_TOL * max(1.0, float(np.max(np.abs(src)))):
        raise DiscretizationError(f"F source has mean {defect:.3e}")
    return poisson_solve(grid, src - defect)


def projection_errors(params, j=0, bubble=None):
    """Sup errors of the projected-bubble expansion over the grid nodes.

    far:  |PU − 8πG − α| where |y| > 2r₀
    full: |PU − χÛ − 8πH − α + 2δ_j²F| everywhere
    """
    bubble = bubble or project_bubble(params, j)
    grid = params.grid
    xi = params.config.points[j]
    alpha = alpha_constant(params, j)
    F = solve_F(params, j)
    x = grid.points
    r = np.linalg.norm(params.surface.displacement(x, xi), axis=-1)
    far = r > 2 * params.r0
    G = params.data.green.green(x[far], xi)
    far_err = float(np.max(np.abs(bubble.field.values[far] - EIGHT_PI * G - alpha)))
    H = cut_regular_part(params.data.green, params.chi, np.asarray(xi, dtype=float))(x)
    full = bubble.psi.values - EIGHT_PI * H - alpha + 2 * bubble.delta_j**2 * F.values
    return {"delta": params.delta, "delta_j": bubble.delta_j, "alpha": alpha,
            "far": far_err, "full": float(np.max(np.abs(full)))}


# ── the ansatz W ──────────────────────────────────────────────────────────

class Ansatz:
    """W = Σ PU_j with its hybrid-quadrature integrals."""

    def __init__(self, params):
        self.params = params
        self.bubbles = [project_bubble(params, j) for j in range(params.m)]

    def __call__(self, x):
        return sum(b(x) for b in self.bubbles)

    def lap(self, x):
        """ΔW = Σ(c_j − χ_je^{U_j})."""
        return sum(b.lap(x) for b in self.bubbles)

    @cached_property
    def field(self):
        return sum((b.field for b in self.bubbles[1:]), self.bubbles[0].field)

    def log_k(self, x):
        with np.errstate(divide="ignore", invalid="ignore"):
            return log_k(self.params.data, x, check=False)

    def kew(self, x):
        return np.exp(self.log_k(x) + self(x))

    @cached_property
    def kew_integral(self):
        return float(self.params.quadrature.integrate(self.kew))

    @cached_property
    def kew_grid(self):
        return np.exp(self.log_k(self.params.grid.points) + self.field.values)

    def residual(self, x, lam):
        """R = ΔW + λ(ke^W/∫ke^W − 1/|S|) at x."""
        area = self.params.surface.area
        return self.lap(x) + lam * (self.kew(x) / self.kew_integral - 1.0 / area)

    def dirichlet(self):
        """½∫|∇W|² = ½Σ_j ∫χ_je^{U_j}W over the cutoff disks (∫W = 0)."""
        return -0.5 * sum(b.pair(self) for b in self.bubbles)


def ansatz_W(params):
    return Ansatz(params).field


def residual_R(params, lam, ansatz=None):
    """R on the grid nodes."""
    lambda_window(params, lam)
    ansatz = ansatz or Ansatz(params)
    return Field(params.grid, ansatz.residual(params.grid.points, lam))


def residual_integral(params, lam, ansatz=None):
    """∫R by hybrid quadrature."""
    ansatz = ansatz or Ansatz(params)
    return float(params.quadrature.integrate(lambda x: ansatz.residual(x, lam)))


def profile_difference(params, other_profile):
    """sup over |y_j| > 2r₀ of |W_χ − W_χ′| for two cutoff profiles."""
    other = BubbleParams(params.data, params.config, params.delta, params.r0, other_profile,
                         params.grid)
    diff = ansatz_W(params).values - ansatz_W(other).values
    far = np.ones(params.grid.shape, dtype=bool)
    for xi in params.config.points:
        y = params.surface.displacement(params.grid.points, xi)
        far &= np.linalg.norm(y, axis=-1) > 2 * params.r0
    return float(np.max(np.abs(diff[far])))


# ── ∗-norm ────────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class StarNorm:
    """‖h‖_∗ = sup |h(x)|·[Σ_j δ_j^σ/(δ_j² + d_j(x)²)^{1+σ/2}]^{-1}, d_j = min(|y_j|, r₀)."""

    params: BubbleParams
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if not 0 < self.sigma < 1:
            raise DomainError(f"σ must lie in (0, 1), got {self.sigma}")

    def weight(self, x):
        p, sig = self.params, self.sigma
        total = 0.0
        for xi, d in zip(p.config.points, p.deltas):
            dist = np.minimum(np.linalg.norm(p.surface.displacement(x, xi), axis=-1), p.r0)
            total = total + d**sig / (d * d + dist * dist) ** (1 + sig / 2)
        return 1.0 / total

    @cached_property
    def grid_weight(self):
        return self.weight(self.params.grid.points)


def star_norm(norm, h):
    values = h.values if isinstance(h, Field) else np.asarray(h, dtype=float)
    return float(np.max(np.abs(values) * norm.grid_weight))


# ── kernel elements ───────────────────────────────────────────────────────

@dataclass(eq=False)
class KernelSet:
    """PZ_ij (i = 1, 2) per bubble and PZ = Σ_j PZ_0j.

    Index a = 2j + (i − 1) for the dipoles, a = 2m for PZ.
    """

    params: BubbleParams
    dipoles: list
    radial: list

    @property
    def size(self):
        return len(self.dipoles) + 1

    def P(self, a):
        if a < len(self.dipoles):
            return self.dipoles[a]
        return lambda x: sum(z(x) for z in self.radial)

    @cached_property
    def grid_P(self):
        """(2m+1, n, n) node values of PZ_ij and PZ."""
        pz = sum(z.field.values for z in self.radial)
        return np.stack([z.field.values for z in self.dipoles] + [pz])

    @cached_property
    def grid_D(self):
        """(2m+1, n, n) node values of ΔPZ_ij and ΔPZ."""
        dz = sum(z.lap_field.values for z in self.radial)
        return np.stack([z.lap_field.values for z in self.dipoles] + [dz])

    def _pair(self, a, g):
        if a < len(self.dipoles):
            return self.dipoles[a].pair(g)
        return sum(z.pair(g) for z in self.radial)

    def pairing_matrix(self):
        """M[a, b] = ∫ΔPZ_a·PZ_b."""
        K = self.size
        out = np.empty((K, K))
        for b in range(K):
            g = self.P(b)
            for a in range(K):
                out[a, b] = self._pair(a, g)
        return out

    def approximation_errors(self):
        """sup over the grid of |PZ_ij − χZ_ij| and |PZ_0j − χ(Z_0j + 2)|."""
        dip = max(float(np.max(np.abs(z.psi.values))) for z in self.dipoles)
        rad = 0.0
        for z in self.radial:
            y = self.params.surface.displacement(self.params.grid.points, z.center)
            chi = self.params.chi.chi(np.linalg.norm(y, axis=-1))
            rad = max(rad, float(np.max(np.abs(z.psi.values - 2 * chi))))
        return {"dipole": dip, "radial": rad}


def kernel_elements(params):
    grid, chi = params.grid, params.chi
    dipoles, radial = [], []
    for xi, d in zip(params.config.points, params.deltas):
        for i in range(2):
            dipoles.append(Projection(grid, chi, xi, _dipole_kernel(d, i), d))
        radial.append(Projection(grid, chi, xi, _radial_kernel(d), d))
    return KernelSet(params, dipoles, radial)


# ── linearized operator ───────────────────────────────────────────────────

class LinearizedOperator:
    """L(φ) = Δφ + ρ̂(φ − ⟨φ⟩), ρ̂ = λke^W/∫ke^W, ⟨φ⟩ = ∫ρ̂φ/∫ρ̂, on grid nodes.

    Grid integrals are used throughout so that ∫L(φ) = 0 holds to roundoff.
    """

    def __init__(self, params, lam, ansatz=None):
        self.params = params
        self.lam = float(lam)
        self.grid = params.grid
        self.ansatz = ansatz or Ansatz(params)
        kew = self.ansatz.kew_grid
        self.rho_hat = self.lam * kew / integrate(self.grid, kew)
        q2 = self.grid.q2
        with np.errstate(divide="ignore"):
            self._inv_lap = np.where(q2 > 0, 1.0 / q2, 0.0)
            self._inv_half = np.where(q2 > 0, 1.0 / np.sqrt(q2), 0.0)
        self._half = np.sqrt(q2)

    def weighted_mean(self, values):
        return float(np.sum(self.rho_hat * values) / np.sum(self.rho_hat))

    def mass(self, values):
        """Mφ = ρ̂(φ − ⟨φ⟩)."""
        return self.rho_hat * (values - self.weighted_mean(values))

    def inverse_laplacian(self, values):
        """(−Δ)^{-1} on the zero-mean part."""
        return spectral_multiply(self.grid, values, self._inv_lap)

    def apply(self, phi):
        if not phi.is_zero_mean:
            raise ZeroMeanError(f"L acts on zero-mean functions; mean is {phi.mean:.3e}")
        return laplacian(phi) + self.mass(phi.values)


def apply_L(op, phi):
    return op.apply(phi)


def nonlinear_N(op, phi):
    """λ[ke^{W+φ}/∫ke^{W+φ} − ke^W/∫ke^W − (ke^W/∫ke^W)(φ − ⟨φ⟩)] on the grid."""
    values = phi.values if isinstance(phi, Field) else np.asarray(phi, dtype=float)
    kew = op.ansatz.kew_grid
    full = kew * np.exp(values)
    out = op.lam * full / integrate(op.grid, full) - op.rho_hat - op.mass(values)
    return Field(op.grid, out)


def near_kernel_spectrum(op, kernels=None, count=None, shift=1.0, tol=1e-8):
    """Eigenvalues ν of Lφ = ν(−Δ)φ closest to 0, sorted by |ν|.

    Computed as κ − 1 for K = (−Δ)^{-1/2}M(−Δ)^{-1/2} by shift-invert Lanczos
    at κ = shift; inner solves use MINRES. With `kernels`, K is compressed to
    the complement of the constraints ∫φΔPZ_a = 0, i.e. of (−Δ)^{1/2}PZ_a.
    """
    grid = op.grid
    shape = grid.shape
    size = shape[0] * shape[1]
    count = count or 2 * op.params.m + 3

    def apply_K(v):
        u = spectral_multiply(grid, v.reshape(shape), op._inv_half)
        return spectral_multiply(grid, op.mass(u), op._inv_half).ravel()

    if kernels is not None:
        C = np.stack([spectral_multiply(grid, P, op._half).ravel() for P in kernels.grid_P], axis=1)
        Q, _ = np.linalg.qr(C)

        def project(v):
            return v - Q @ (Q.T @ v)
    else:
        def project(v):
            return v

    def apply_KP(v):
        return project(apply_K(project(v)))

    K_op = LinearOperator((size, size), matvec=apply_KP, dtype=float)
    shifted = LinearOperator((size, size), matvec=lambda v: apply_KP(v) - shift * v, dtype=float)

    def solve_shifted(b):
        x, info = minres(shifted, b, rtol=1e-12, maxiter=5000)
        if info != 0:
            logger.debug("MINRES inner solve stopped with info=%d", info)
        return x

    OPinv = LinearOperator((size, size), matvec=solve_shifted, dtype=float)
    v0 = np.random.default_rng(0).standard_normal(size)
    kappa = eigsh(K_op, k=count, sigma=shift, OPinv=OPinv, which="LM", v0=v0, tol=tol,
                  return_eigenvectors=False)
    nu = np.asarray(kappa) - 1.0
    return nu[np.argsort(np.abs(nu))]


# ── projected correction ──────────────────────────────────────────────────

@dataclass(eq=False)
class Correction:
    phi: Field
    c0: float
    cij: np.ndarray
    iterations: int
    ratios: list = field(default_factory=list)
    orthogonality: np.ndarray = None

    @property
    def sup(self):
        return self.phi.sup()

    @property
    def multiplier_size(self):
        return abs(self.c0) + float(np.sum(np.abs(self.cij)))


class ProjectedInverse:
    """T: h ↦ (φ, c) with L(φ) = h + Σ_a c_aΔPZ_a and ∫φΔPZ_a = 0.

    Solved in preconditioned form −φ + (−Δ)^{-1}Mφ + Σ c_a PZ_a = (−Δ)^{-1}h,
    augmented with the constraint rows, by LSMR.
    """

    def __init__(self, op, kernels):
        self.op, self.kernels = op, kernels
        grid = op.grid
        self.shape = grid.shape
        self.size = self.shape[0] * self.shape[1]
        P = kernels.grid_P
        P = P - P.mean(axis=(1, 2), keepdims=True)
        self._p_scale = np.linalg.norm(P.reshape(len(P), -1), axis=1)
        self._P = (P.reshape(len(P), -1) / self._p_scale[:, None]).T
        D = kernels.grid_D.reshape(len(P), -1)
        self._d_scale = np.linalg.norm(D, axis=1)
        self._D = (D / self._d_scale[:, None]).T
        K = len(P)
        n = self.size

        def matvec(x):
            phi, c = x[:n], x[n:]
            top = -phi + op.inverse_laplacian(op.mass(phi.reshape(self.shape))).ravel() + self._P @ c
            return np.concatenate([top, self._D.T @ phi])

        def rmatvec(y):
            u, v = y[:n], y[n:]
            top = -u + op.mass(op.inverse_laplacian(u.reshape(self.shape))).ravel() + self._D @ v
            return np.concatenate([top, self._P.T @ u])

        self.operator = LinearOperator((n + K, n + K), matvec=matvec, rmatvec=rmatvec, dtype=float)
        self._last = None

    def __call__(self, h):
        n = self.size
        rhs = np.concatenate([self.op.inverse_laplacian(h).ravel(), np.zeros(self.kernels.size)])
        sol = lsmr(self.operator, rhs, atol=1e-13, btol=1e-13, conlim=1e12,
                   maxiter=LSMR_MAX_ITER, x0=self._last)
        x = sol[0]
        rel = np.linalg.norm(self.operator.matvec(x) - rhs) / max(np.linalg.norm(rhs), 1e-300)
        if rel > LINEAR_TOL:
            raise NonConvergenceError(f"projected linear solve stalled at relative residual {rel:.3e}",
                                      iterations=int(sol[2]))
        self._last = x
        phi = x[:n].reshape(self.shape)
        phi = phi - phi.mean()
        return phi, x[n:] / self._p_scale


def solve_projected_correction(params, lam, max_iter=FIXED_POINT_MAX_ITER, tol=FIXED_POINT_TOL,
                               delta_max=DEFAULT_DELTA_MAX, ansatz=None, kernels=None):
    """Fixed point φ ← T(−R − N(φ)); returns φ with the multipliers c₀, c_ij."""
    if params.delta > delta_max:
        raise DomainError(f"δ={params.delta:.4g} above δ₀={delta_max:.4g}")
    lambda_window(params, lam)
    ansatz = ansatz or Ansatz(params)
    kernels = kernels or kernel_elements(params)
    op = LinearizedOperator(params, lam, ansatz)
    T = ProjectedInverse(op, kernels)
    R = residual_R(params, lam, ansatz).values
    R = R - R.mean()

    phi = np.zeros(params.grid.shape)
    c = np.zeros(kernels.size)
    prev, ratios = None, []
    for it in range(1, max_iter + 1):
        h = -R - nonlinear_N(op, phi).values
        new, c = T(h - h.mean())
        diff = float(np.max(np.abs(new - phi)))
        if prev:
            ratios.append(diff / prev)
        logger.debug("correction iteration %d: ‖Δφ‖∞=%.3e", it, diff)
        phi, prev = new, diff
        if diff < tol:
            break
    else:
        last = ratios[-1] if ratios else None
        raise NonConvergenceError(
            f"correction fixed point did not contract in {max_iter} iterations "
            f"(last ratio {last if last is None else f'{last:.3g}'})",
            iterations=max_iter, last_ratio=last)

    area_w = params.grid.weights
    ortho = np.array([abs(float(np.sum(area_w * phi * D))) for D in kernels.grid_D])
    logger.info("correction converged in %d iterations: ‖φ‖∞=%.3e", it, np.max(np.abs(phi)))
    return Correction(Field(params.grid, phi), float(c[-1]), c[:-1].reshape(params.m, 2), it,
                      ratios, ortho)
