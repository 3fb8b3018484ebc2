# backend/surface.py
"""Surfaces, isothermal charts, quadrature grids and the spectral Poisson solver.

Every other module computes on the objects defined here. Torus points are
2-vectors in the plane (any lattice representative); sphere points are unit
3-vectors. All types are immutable after construction.
"""

import logging
import math
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import fft as sfft
from scipy import ndimage

from backend.errors import ChartRadiusError, DomainError, UnsupportedSurfaceError, ZeroMeanError

logger = logging.getLogger(__name__)

TORUS = "torus"
SPHERE = "sphere"

_SPHERE_INJECTIVITY = math.pi / 4
_SPHERE_DEFAULT_R0 = 0.5
_POLAR_ORDER = 16          # Gauss–Legendre nodes per radial panel
_POLAR_ANGLES = 64
_TRANSITION_PANELS = 16
_ZERO_MEAN_TOL = 1e-10


def _fft_workers():
    """Thread count for scipy.fft, from MFLAB_THREADS (unset → scipy default)."""
    raw = os.environ.get("MFLAB_THREADS")
    if not raw:
        return None
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning("ignoring non-integer MFLAB_THREADS=%r", raw)
        return None


# ── Surface ───────────────────────────────────────────────────────────────

def _reduce_basis(b1, b2):
    """Lagrange–Gauss reduction: returns a shortest basis of the same lattice."""
    b1, b2 = np.asarray(b1, float), np.asarray(b2, float)
    if b1 @ b1 > b2 @ b2:
        b1, b2 = b2, b1
    while True:
        mu = round(float(b1 @ b2) / float(b1 @ b1))
        b2 = b2 - mu * b1
        if b2 @ b2 >= b1 @ b1:
            return b1, b2
        b1, b2 = b2, b1


@dataclass(frozen=True)
class Surface:
    """Flat torus (two period vectors) or the unit round sphere."""

    kind: str
    periods: tuple = None

    @classmethod
    def flat_torus(cls, periods):
        p = np.asarray(periods, dtype=float)
        if p.shape != (2, 2):
            raise DomainError(f"torus periods must be two 2-vectors, got shape {p.shape}")
        if abs(np.linalg.det(p)) < 1e-12:
            raise DomainError("torus periods are linearly dependent")
        b1, b2 = _reduce_basis(p[0], p[1])
        if b1[0] * b2[1] - b1[1] * b2[0] < 0:
            b2 = -b2
        return cls(TORUS, (tuple(map(float, b1)), tuple(map(float, b2))))

    @classmethod
    def round_sphere(cls):
        return cls(SPHERE, None)

    @property
    def is_torus(self):
        return self.kind == TORUS

    @cached_property
    def basis(self):
        """2×2 matrix whose rows are the (reduced) period vectors."""
        if not self.is_torus:
            raise UnsupportedSurfaceError("the sphere has no period lattice")
        return np.array(self.periods, dtype=float)

    @cached_property
    def basis_inv(self):
        return np.linalg.inv(self.basis)

    @property
    def ambient_dim(self):
        return 2 if self.is_torus else 3

    @cached_property
    def area(self):
        return abs(float(np.linalg.det(self.basis))) if self.is_torus else 4 * math.pi

    @property
    def euler_characteristic(self):
        return 0 if self.is_torus else 2

    def curvature(self, x):
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        return np.zeros(shape) if self.is_torus else np.ones(shape)

    @property
    def shortest_period(self):
        return float(np.linalg.norm(self.basis[0]))

    @property
    def injectivity_bound(self):
        return 0.25 * self.shortest_period if self.is_torus else _SPHERE_INJECTIVITY

    @property
    def default_r0(self):
        return self.injectivity_bound if self.is_torus else _SPHERE_DEFAULT_R0

    def normalize(self, x):
        """Canonical representative: fundamental cell [0,1)² in lattice coordinates / unit vector."""
        x = np.asarray(x, dtype=float)
        if self.is_torus:
            s = x @ self.basis_inv
            return (s - np.floor(s)) @ self.basis
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    def displacement(self, x, xi):
        """Shortest lattice representative of x − ξ (torus only)."""
        if not self.is_torus:
            raise UnsupportedSurfaceError("displacement vectors are defined on the torus only")
        d = np.asarray(x, dtype=float) - np.asarray(xi, dtype=float)
        s = d @ self.basis_inv
        d = (s - np.round(s)) @ self.basis
        best = d
        best_n2 = np.sum(d * d, axis=-1)
        for a in (-1, 0, 1):
            for b in (-1, 0, 1):
                if a == 0 and b == 0:
                    continue
                cand = d + a * self.basis[0] + b * self.basis[1]
                n2 = np.sum(cand * cand, axis=-1)
                better = n2 < best_n2
                best = np.where(better[..., None], cand, best)
                best_n2 = np.where(better, n2, best_n2)
        return best

    def distance(self, x, y):
        if self.is_torus:
            return np.linalg.norm(self.displacement(x, y), axis=-1)
        dot = np.sum(np.asarray(x) * np.asarray(y), axis=-1)
        return np.arccos(np.clip(dot, -1.0, 1.0))

    def random_points(self, rng, count):
        if self.is_torus:
            return rng.random((count, 2)) @ self.basis
        v = rng.normal(size=(count, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)


# ── Charts ────────────────────────────────────────────────────────────────

def _rotation_to_south_pole(xi):
    """Rotation matrix R with R @ ξ = (0, 0, −1)."""
    a = np.asarray(xi, dtype=float)
    a = a / np.linalg.norm(a)
    b = np.array([0.0, 0.0, -1.0])
    c = float(a @ b)
    if c < -1 + 1e-14:
        return np.diag([1.0, -1.0, -1.0])
    v = np.cross(a, b)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx / (1 + c)


@dataclass(frozen=True, eq=False)
class Chart:
    """Isothermal chart y_ξ around ξ with g = e^{φ̂(y)}·(Euclidean), φ̂(0)=0, ∇φ̂(0)=0.

    Torus: y = x − ξ (shortest representative), φ̂ ≡ 0.
    Sphere: stereographic projection from the antipode of ξ after rotating ξ
    to the south pole; the factor 16/(4+|y|²)² already equals 1 with zero
    gradient at the origin, so the normalising affine map is the identity.
    """

    surface: Surface
    center: np.ndarray
    r0: float
    rotation: np.ndarray = None

    def to_chart(self, x):
        x = np.asarray(x, dtype=float)
        if self.surface.is_torus:
            return self.surface.displacement(x, self.center)
        p = x @ self.rotation.T
        denom = 1.0 - p[..., 2]
        pole = denom < 1e-15
        y = 2.0 * p[..., :2] / np.where(pole, 1.0, denom)[..., None]
        # the antipode of ξ maps to infinity
        return np.where(pole[..., None], 1e300, y)

    def from_chart(self, y):
        y = np.asarray(y, dtype=float)
        if self.surface.is_torus:
            return self.center + y
        s = np.sum(y * y, axis=-1)
        p = np.concatenate([4.0 * y / (4.0 + s)[..., None], ((s - 4.0) / (s + 4.0))[..., None]], axis=-1)
        return p @ self.rotation

    def conformal_factor(self, y):
        y = np.asarray(y, dtype=float)
        if self.surface.is_torus:
            return np.zeros(y.shape[:-1])
        s = np.sum(y * y, axis=-1)
        return math.log(16.0) - 2.0 * np.log(4.0 + s)

    def jacobian(self, y):
        """∂x/∂y of from_chart, shape (..., d, 2)."""
        y = np.asarray(y, dtype=float)
        if self.surface.is_torus:
            return np.broadcast_to(np.eye(2), y.shape[:-1] + (2, 2)).copy()
        s = np.sum(y * y, axis=-1)[..., None, None]
        eye = np.eye(2)
        top = 4.0 * eye / (4.0 + s) - 8.0 * y[..., :, None] * y[..., None, :] / (4.0 + s) ** 2
        bottom = (16.0 * y / (4.0 + s[..., 0]) ** 2)[..., None, :]
        J = np.concatenate([top, bottom], axis=-2)
        return np.einsum("ji,...jk->...ik", self.rotation, J)

    @cached_property
    def tangent_basis(self):
        """Ambient images of the chart axes at ξ (columns); orthonormal."""
        if self.surface.is_torus:
            return np.eye(2)
        return self.rotation.T[:, :2].copy()


def chart_at(surface, xi, r0=None):
    """Isothermal chart centred at ξ with cutoff radius r₀."""
    r0 = surface.default_r0 if r0 is None else float(r0)
    if not 0 < r0 <= surface.injectivity_bound + 1e-15:
        raise ChartRadiusError(
            f"r0={r0:.6g} outside (0, {surface.injectivity_bound:.6g}] for the {surface.kind}")
    xi = np.asarray(xi, dtype=float)
    if surface.is_torus:
        return Chart(surface, xi.copy(), r0)
    xi = xi / np.linalg.norm(xi)
    return Chart(surface, xi, r0, _rotation_to_south_pole(xi))


def chart_pde_residual(chart, h=1e-3, samples=25):
    """Sup over B_{r₀}(0) of |Δφ̂ + 2K e^{φ̂}| with a 4th-order finite-difference Laplacian."""
    r = np.linspace(0.0, chart.r0, samples)
    t = np.linspace(0.0, 2 * math.pi, samples, endpoint=False)
    R, T = np.meshgrid(r, t)
    y = np.stack([R * np.cos(T), R * np.sin(T)], axis=-1).reshape(-1, 2)
    f = chart.conformal_factor
    lap = np.zeros(len(y))
    for e in (np.array([h, 0.0]), np.array([0.0, h])):
        lap += (-f(y + 2 * e) + 16 * f(y + e) - 30 * f(y) + 16 * f(y - e) - f(y - 2 * e)) / (12 * h * h)
    K = chart.surface.curvature(chart.from_chart(y))
    return float(np.max(np.abs(lap + 2 * K * np.exp(f(y)))))


# ── Cutoff profiles ───────────────────────────────────────────────────────

def _smooth_f(t):
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        return np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)


def _smooth_step(t):
    """C^∞ step: 0 for t≤0, 1 for t≥1; returns (s, s', s'')."""
    t = np.clip(t, 0.0, 1.0)
    g, h = _smooth_f(t), _smooth_f(1 - t)
    with np.errstate(divide="ignore", invalid="ignore"):
        tt = np.where(t > 0, t, 1.0)
        uu = np.where(t < 1, 1 - t, 1.0)
        g1 = np.where(t > 0, g / tt**2, 0.0)
        g2 = np.where(t > 0, g * (1 / tt**4 - 2 / tt**3), 0.0)
        f1u = np.where(t < 1, h / uu**2, 0.0)
        f2u = np.where(t < 1, h * (1 / uu**4 - 2 / uu**3), 0.0)
    h1, h2 = -f1u, f2u
    D = g + h
    N = g1 * h - g * h1
    N1 = g2 * h - g * h2
    D1 = g1 + h1
    return g / D, N / D**2, N1 / D**2 - 2 * N * D1 / D**3


_POLYNOMIAL_STEPS = {
    # s(t), s'(t), s''(t) on [0, 1]
    "quintic": (lambda t: 10 * t**3 - 15 * t**4 + 6 * t**5,
                lambda t: 30 * t**2 - 60 * t**3 + 30 * t**4,
                lambda t: 60 * t - 180 * t**2 + 120 * t**3),
    "septic": (lambda t: 35 * t**4 - 84 * t**5 + 70 * t**6 - 20 * t**7,
               lambda t: 140 * t**3 - 420 * t**4 + 420 * t**5 - 140 * t**6,
               lambda t: 420 * t**2 - 1680 * t**3 + 2100 * t**4 - 840 * t**5),
}

CUTOFF_PROFILES = ("quintic", "septic", "smooth")


@dataclass(frozen=True)
class CutoffProfile:
    """Radial cutoff χ: ≡1 on [0, r₀], decreasing on [r₀, 2r₀], ≡0 beyond."""

    name: str = "quintic"
    r0: float = 0.25

    def _step(self, r):
        t = np.clip((np.asarray(r, dtype=float) - self.r0) / self.r0, 0.0, 1.0)
        if self.name == "smooth":
            return _smooth_step(t)
        s, s1, s2 = _POLYNOMIAL_STEPS[self.name]
        return s(t), s1(t), s2(t)

    def chi(self, r):
        return 1.0 - self._step(r)[0]

    def derivatives(self, r):
        """(χ, χ′, χ″) as functions of r."""
        s, s1, s2 = self._step(r)
        return 1.0 - s, -s1 / self.r0, -s2 / self.r0**2

    def transition(self):
        """Radial nodes/weights on [r₀, 2r₀], where χ′ is supported."""
        return uniform_radii(self.r0, 2 * self.r0)


def cutoff_profile(name, r0):
    if name not in CUTOFF_PROFILES:
        raise DomainError(f"unknown cutoff profile {name!r}; choose from {CUTOFF_PROFILES}")
    return CutoffProfile(name, float(r0))


# ── Quadrature grids and fields ───────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class QuadratureGrid:
    """Tensor-product quadrature: uniform periodic (torus) or lon × Gauss-lat (sphere)."""

    surface: Surface
    n: int
    n_lat: int = None

    @cached_property
    def shape(self):
        if self.surface.is_torus:
            return (self.n, self.n)
        return (self.n_lat or self.n // 2, self.n)

    @cached_property
    def _sphere_nodes(self):
        n_lat, n_lon = self.shape
        z, wz = leggauss(n_lat)
        lon = 2 * math.pi * np.arange(n_lon) / n_lon
        return z, wz, lon

    @cached_property
    def points(self):
        if self.surface.is_torus:
            s = np.arange(self.n) / self.n
            S1, S2 = np.meshgrid(s, s, indexing="ij")
            return np.stack([S1, S2], axis=-1) @ self.surface.basis
        z, _, lon = self._sphere_nodes
        Z, L = np.meshgrid(z, lon, indexing="ij")
        rho = np.sqrt(1 - Z**2)
        return np.stack([rho * np.cos(L), rho * np.sin(L), Z], axis=-1)

    @cached_property
    def weights(self):
        if self.surface.is_torus:
            return np.full(self.shape, self.surface.area / self.n**2)
        _, wz, lon = self._sphere_nodes
        return np.repeat(wz[:, None] * (2 * math.pi / len(lon)), len(lon), axis=1)

    @cached_property
    def wavevectors(self):
        """Physical wavevectors q = 2π B⁻¹k on the FFT layout, shape (n, n, 2)."""
        if not self.surface.is_torus:
            raise UnsupportedSurfaceError("spectral operators are available on the torus only")
        k = sfft.fftfreq(self.n, d=1.0 / self.n)
        K1, K2 = np.meshgrid(k, k, indexing="ij")
        kk = np.stack([K1, K2], axis=-1)
        return 2 * math.pi * kk @ self.surface.basis_inv.T

    @cached_property
    def q2(self):
        q = self.wavevectors
        return np.sum(q * q, axis=-1)

    @cached_property
    def _nyquist_mask(self):
        k = sfft.fftfreq(self.n, d=1.0 / self.n)
        nyq = np.abs(k) == self.n // 2 if self.n % 2 == 0 else np.zeros(self.n, bool)
        return nyq[:, None] | nyq[None, :]

    def field(self, values):
        return Field(self, values)

    def evaluate(self, fn):
        """Field of fn(points) sampled at the nodes."""
        return Field(self, fn(self.points))


def make_grid(surface, n=None, n_lat=None):
    if surface.is_torus:
        return QuadratureGrid(surface, int(n or 256))
    n = int(n or 256)
    return QuadratureGrid(surface, n, int(n_lat or n // 2))


@dataclass(frozen=True, eq=False)
class Field:
    """Scalar function sampled on a QuadratureGrid."""

    grid: QuadratureGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise DomainError(f"field shape {v.shape} does not match grid {self.grid.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @cached_property
    def mean(self):
        return float(np.sum(self.grid.weights * self.values) / self.grid.surface.area)

    @property
    def is_zero_mean(self):
        scale = float(np.max(np.abs(self.values))) if self.values.size else 0.0
        return abs(self.mean) <= 1e-12 * max(scale, 1e-300)

    def sup(self):
        return float(np.max(np.abs(self.values)))

    def centered(self):
        return Field(self.grid, self.values - self.mean)

    def _other(self, other):
        return other.values if isinstance(other, Field) else other

    def __add__(self, other):
        return Field(self.grid, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Field(self.grid, self.values - self._other(other))

    def __rsub__(self, other):
        return Field(self.grid, self._other(other) - self.values)

    def __mul__(self, other):
        return Field(self.grid, self.values * self._other(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Field(self.grid, self.values / self._other(other))

    def __neg__(self):
        return Field(self.grid, -self.values)


def integrate(grid, f):
    """Σ w_i f_i for a Field or a node-shaped array."""
    values = f.values if isinstance(f, Field) else np.asarray(f, dtype=float)
    return float(np.sum(grid.weights * values))


def gauss_bonnet_defect(grid):
    K = grid.surface.curvature(grid.points)
    return abs(integrate(grid, K) - 2 * math.pi * grid.surface.euler_characteristic)


# ── Spectral operators (torus) ────────────────────────────────────────────

def _fft(values):
    return sfft.fft2(values, workers=_fft_workers())


def _ifft(coeffs):
    return sfft.ifft2(coeffs, workers=_fft_workers()).real


def spectral_multiply(grid, values, multiplier):
    """Apply a Fourier multiplier (array on the FFT layout) to node values."""
    return _ifft(_fft(values) * multiplier)


def poisson_solve(grid, rhs, tol=_ZERO_MEAN_TOL):
    """Unique zero-mean u with −Δu = rhs on the flat torus."""
    if not grid.surface.is_torus:
        raise UnsupportedSurfaceError("poisson_solve is implemented for the flat torus only")
    values = rhs.values if isinstance(rhs, Field) else np.asarray(rhs, dtype=float)
    mean = float(np.mean(values))
    if abs(mean) > tol * max(1.0, float(np.max(np.abs(values)))):
        raise ZeroMeanError(f"Poisson right-hand side has mean {mean:.3e}")
    q2 = grid.q2.copy()
    q2[0, 0] = 1.0
    coeffs = _fft(values) / q2
    coeffs[0, 0] = 0.0
    return Field(grid, _ifft(coeffs))


def laplacian(field):
    grid = field.grid
    return Field(grid, spectral_multiply(grid, field.values, -grid.q2))


def gradient(field):
    """Spectral gradient, array of shape (n, n, 2)."""
    grid = field.grid
    coeffs = _fft(field.values)
    coeffs[grid._nyquist_mask] = 0.0
    q = grid.wavevectors
    return np.stack([_ifft(1j * q[..., a] * coeffs) for a in range(2)], axis=-1)


def dirichlet_energy(field):
    """∫|∇u|² computed from Fourier coefficients."""
    grid = field.grid
    c = _fft(field.values) / grid.n**2
    return float(grid.surface.area * np.sum(grid.q2 * np.abs(c) ** 2))


class PeriodicInterpolant:
    """Quintic-spline evaluation of a smooth torus Field at arbitrary points."""

    def __init__(self, field, order=5):
        self.grid = field.grid
        self.order = order
        self._coeffs = ndimage.spline_filter(np.asarray(field.values), order=order, mode="grid-wrap")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        s = (x.reshape(-1, 2) @ self.grid.surface.basis_inv) * self.grid.n
        out = ndimage.map_coordinates(self._coeffs, s.T, order=self.order,
                                      mode="grid-wrap", prefilter=False)
        return out.reshape(x.shape[:-1])


# ── Graded polar quadrature ───────────────────────────────────────────────

def graded_radii(r_max, r_min, r_inner=0.0, order=_POLAR_ORDER):
    """Gauss–Legendre radial nodes/weights on panels graded by factor 0.5.

    r_inner = 0: panels [r_max/2^{k+1}, r_max/2^k] down to r_min plus [0, r_min'].
    r_inner > 0: annulus [r_inner, r_max] graded toward the inner edge.
    """
    if r_inner > 0:
        edges = [r_inner]
        while edges[-1] * 2 < r_max:
            edges.append(edges[-1] * 2)
        edges.append(r_max)
    else:
        edges = [r_max]
        while edges[-1] > r_min:
            edges.append(edges[-1] * 0.5)
        edges.append(0.0)
        edges = edges[::-1]
    x, w = leggauss(order)
    radii, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        if b <= a:
            continue
        radii.append(0.5 * (b - a) * x + 0.5 * (a + b))
        weights.append(0.5 * (b - a) * w)
    return np.concatenate(radii), np.concatenate(weights)


def uniform_radii(a, b, panels=_TRANSITION_PANELS, order=_POLAR_ORDER):
    """Gauss–Legendre nodes/weights on `panels` equal panels of [a, b]."""
    x, w = leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    h = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    return (h[:, None] * x + mid[:, None]).ravel(), (h[:, None] * w).ravel()


def patch_radii(r_flat, r_max, scale, order=_POLAR_ORDER):
    """Graded panels on [0, r_flat], uniform panels across a cutoff transition [r_flat, r_max].

    A C^∞ cutoff is flat to all orders at its junctions; one Gauss–Legendre panel
    across such a point converges slowly, many short ones do not.
    """
    r1, w1 = graded_radii(r_flat, scale / 10.0, order=order)
    r2, w2 = uniform_radii(r_flat, r_max, order=order)
    return np.concatenate([r1, r2]), np.concatenate([w1, w2])


def polar_product(r, wr, n_angle=_POLAR_ANGLES):
    """Tensor a radial rule with the angular trapezoid: nodes y (M, 2), weights r dr dθ (M,)."""
    t = 2 * math.pi * (np.arange(n_angle) + 0.5) / n_angle
    R, T = np.meshgrid(r, t, indexing="ij")
    W = (wr * r)[:, None] * np.full(n_angle, 2 * math.pi / n_angle)[None, :]
    y = np.stack([R * np.cos(T), R * np.sin(T)], axis=-1)
    return y.reshape(-1, 2), W.reshape(-1)


def polar_nodes(r_max, scale, r_inner=0.0, n_angle=_POLAR_ANGLES, order=_POLAR_ORDER):
    """Chart-coordinate nodes y (M, 2) and Euclidean area weights r dr dθ (M,)."""
    return polar_product(*graded_radii(r_max, scale / 10.0, r_inner, order), n_angle)


def integrate_radial(g, r_max, scale, r_inner=0.0):
    """2π ∫ g(r) r dr over [r_inner, r_max] with graded Gauss–Legendre panels."""
    r, w = graded_radii(r_max, scale / 10.0, r_inner)
    return float(2 * math.pi * np.sum(w * r * g(r)))
