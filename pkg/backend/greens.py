# backend/greens.py
"""Green function G(x,ξ), regular part H(x,ξ), Robin function H(ξ,ξ) and gradients.

G is the zero-mean solution of −Δ_g G(·,ξ) = δ_ξ − 1/|S|, and
G(x,ξ) = −(1/2π)·χ(|y_ξ(x)|)·log|y_ξ(x)| + H(x,ξ) with H smooth.

Torus evaluators:
  * "theta" (default): with ζ = z/w₁, τ = w₂/w₁,
        G = −(1/2π)·log|θ₁(πζ|τ)/η(τ)| + (Im ζ)²/(2 Im τ);
    the singular factor ζ is divided out of the θ₁ series analytically, so H
    and the Robin function are evaluated without cancellation.
  * "ewald": Gaussian split of the lattice sum, an independent oracle.
Sphere: closed form G = −(1/2π)·log|x − ξ| + (1/2π)(log 2 − 1/2).
"""

import logging
import math

import numpy as np
from scipy import special

from backend.errors import DomainError, SingularityError
from backend.quadrature import HybridQuadrature
from backend.surface import cutoff_profile

logger = logging.getLogger(__name__)

TWO_PI = 2 * math.pi
FOUR_PI = 4 * math.pi
GREEN_METHODS = ("theta", "ewald")

_COINCIDENCE = 1e-12
_SERIES_TAIL = 40.0        # exp(−40) ≈ 4e-18 relative tail of the θ-series
_SPHERE_CONST = (math.log(2.0) - 0.5) / TWO_PI
SPHERE_C0 = -1.0 / FOUR_PI


def _complex(v):
    v = np.asarray(v, dtype=float)
    return v[..., 0] + 1j * v[..., 1]


def _dsin_over(k, zeta):
    """d/dζ [sin(kπζ)/ζ], with a Taylor branch near ζ = 0."""
    t = k * math.pi * zeta
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = (t * np.cos(t) - np.sin(t)) / (zeta * zeta)
    series = (k * math.pi) ** 3 * zeta * (-1.0 / 3.0 + t * t / 30.0 - t**4 / 840.0)
    return np.where(np.abs(t) < 0.02, series, exact)


def _ein(s):
    """Ein(s) = E₁(s) + log s + γ, entire; series below s = 1."""
    s = np.asarray(s, dtype=float)
    ss = np.minimum(s, 1.0)
    term = ss.copy()
    acc = ss.copy()
    for k in range(2, 40):
        term = -term * ss * (k - 1) / (k * k)
        acc = acc + term
    big = np.maximum(s, 1.0)
    return np.where(s < 1.0, acc, special.exp1(big) + np.log(big) + np.euler_gamma)


# ── Torus: theta-function evaluator ───────────────────────────────────────

class _ThetaLattice:
    def __init__(self, surface):
        b = surface.basis
        self.w1 = complex(b[0, 0], b[0, 1])
        self.c = 1.0 / self.w1
        self.tau = complex(b[1, 0], b[1, 1]) / self.w1
        im = self.tau.imag
        if im <= 0:
            raise DomainError("torus basis must be positively oriented")
        terms = int(math.ceil(math.sqrt(_SERIES_TAIL / (math.pi * im) + 0.25))) + 3
        n = np.arange(terms)
        self.k = 2 * n + 1
        self.a = (-1.0) ** n * np.exp(1j * math.pi * self.tau * (n + 0.5) ** 2)
        m = np.arange(1, 2 * terms + 8)
        self.log_abs_eta = (-math.pi * im / 12.0
                            + float(np.sum(np.log(np.abs(1 - np.exp(2j * math.pi * m * self.tau))))))
        self.log_abs_w1 = math.log(abs(self.w1))

    def zeta(self, z):
        return _complex(z) * self.c

    def S(self, zeta):
        """θ₁(πζ|τ)/ζ, analytic at ζ = 0."""
        kz = zeta[..., None] * self.k
        return TWO_PI * np.sum(self.a * self.k * np.sinc(kz), axis=-1)

    def dS(self, zeta):
        return 2.0 * np.sum(self.a * _dsin_over(self.k, zeta[..., None]), axis=-1)

    def _quadratic(self, zeta):
        return zeta.imag**2 / (2 * self.tau.imag)

    def _quadratic_grad(self, zeta):
        f = zeta.imag / self.tau.imag
        return np.stack([f * self.c.imag, f * self.c.real], axis=-1)

    def h_near(self, z):
        """G + (1/2π)·log|z|, smooth on the whole shortest-representative cell."""
        zeta = self.zeta(z)
        return (-(np.log(np.abs(self.S(zeta))) - self.log_abs_eta) / TWO_PI
                + self.log_abs_w1 / TWO_PI + self._quadratic(zeta))

    def h_near_grad(self, z):
        zeta = self.zeta(z)
        fp = -(self.dS(zeta) / self.S(zeta)) * self.c / TWO_PI
        return np.stack([fp.real, -fp.imag], axis=-1) + self._quadratic_grad(zeta)

    def green_grad(self, z):
        zeta = self.zeta(z)
        v = math.pi * zeta[..., None] * self.k
        theta = 2.0 * np.sum(self.a * np.sin(v), axis=-1)
        dtheta = 2.0 * np.sum(self.a * self.k * np.cos(v), axis=-1)
        fp = -(math.pi * self.c / TWO_PI) * dtheta / theta
        return np.stack([fp.real, -fp.imag], axis=-1) + self._quadratic_grad(zeta)

    def robin(self):
        s0 = abs(TWO_PI * np.sum(self.a * self.k))
        return -(math.log(s0) - self.log_abs_eta) / TWO_PI + self.log_abs_w1 / TWO_PI


# ── Torus: Ewald evaluator ────────────────────────────────────────────────

class _EwaldLattice:
    def __init__(self, surface):
        self.area = surface.area
        b = surface.basis
        self.alpha = 0.02 * self.area
        short = float(np.linalg.norm(b[0]))
        reach = (12.0 * math.sqrt(self.alpha) + float(np.linalg.norm(b[0] + b[1]))) / (0.86 * short)
        nr = int(math.ceil(reach)) + 1
        idx = np.arange(-nr, nr + 1)
        A, B = np.meshgrid(idx, idx, indexing="ij")
        self.images = np.stack([A.ravel(), B.ravel()], axis=-1) @ b
        qmax = 6.3 / math.sqrt(self.alpha)
        nk = int(math.ceil(qmax * float(np.linalg.norm(b, axis=1).max()) / (TWO_PI * 0.86))) + 1
        kk = np.arange(-nk, nk + 1)
        K1, K2 = np.meshgrid(kk, kk, indexing="ij")
        k = np.stack([K1.ravel(), K2.ravel()], axis=-1)
        k = k[np.any(k != 0, axis=1)]
        q = TWO_PI * k @ surface.basis_inv.T
        q2 = np.sum(q * q, axis=1)
        self.q = q
        self.coef = np.exp(-self.alpha * q2) / q2 / self.area
        self._is_origin = np.all(self.images == 0, axis=1)

    def _fourier(self, z):
        return np.cos(z @ self.q.T) @ self.coef

    def _fourier_grad(self, z):
        return -(np.sin(z @ self.q.T) * self.coef) @ self.q

    def green(self, z):
        z = np.asarray(z, dtype=float)
        d = z[..., None, :] - self.images
        s = np.sum(d * d, axis=-1) / (4 * self.alpha)
        with np.errstate(divide="ignore"):
            real = np.sum(special.exp1(s), axis=-1) / FOUR_PI
        return self._fourier(z) + real - self.alpha / self.area

    def h_near(self, z):
        z = np.asarray(z, dtype=float)
        d = z[..., None, :] - self.images[~self._is_origin]
        s = np.sum(d * d, axis=-1) / (4 * self.alpha)
        real = np.sum(special.exp1(s), axis=-1) / FOUR_PI
        s0 = np.sum(z * z, axis=-1) / (4 * self.alpha)
        # E₁(s₀) + log|z|·2 = Ein(s₀) − γ + log(4α)
        own = (_ein(s0) - np.euler_gamma + math.log(4 * self.alpha)) / FOUR_PI
        return self._fourier(z) + real + own - self.alpha / self.area

    def green_grad(self, z):
        z = np.asarray(z, dtype=float)
        d = z[..., None, :] - self.images
        r2 = np.sum(d * d, axis=-1)
        w = np.exp(-r2 / (4 * self.alpha)) / r2
        return self._fourier_grad(z) - np.sum(w[..., None] * d, axis=-2) / TWO_PI

    def h_near_grad(self, z):
        z = np.asarray(z, dtype=float)
        d = z[..., None, :] - self.images[~self._is_origin]
        r2 = np.sum(d * d, axis=-1)
        w = np.exp(-r2 / (4 * self.alpha)) / r2
        g = self._fourier_grad(z) - np.sum(w[..., None] * d, axis=-2) / TWO_PI
        s0 = np.sum(z * z, axis=-1) / (4 * self.alpha)
        # (1 − e^{−s})/r² → 1/(4α) as r → 0
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(s0 > 1e-8, -np.expm1(-s0) / (4 * self.alpha * s0), 1.0 / (4 * self.alpha))
        return g + f[..., None] * z / TWO_PI

    def robin(self):
        return float(self.h_near(np.zeros(2)))


# ── Public evaluator ──────────────────────────────────────────────────────

class GreenEvaluator:
    """G, H, H(ξ,ξ) and ∇_x of G and H on a torus or the round sphere.

    x may be any array of points (..., d); ξ is a single point. Sphere
    gradients are tangent vectors at x in ambient 3-space.
    """

    def __init__(self, surface, method="theta", cutoff=None):
        if method not in GREEN_METHODS:
            raise DomainError(f"unknown Green method {method!r}; choose from {GREEN_METHODS}")
        self.surface = surface
        self.method = method if surface.is_torus else "closed-form"
        self.cutoff = cutoff or cutoff_profile("quintic", surface.default_r0)
        if surface.is_torus:
            self._lattice = _ThetaLattice(surface) if method == "theta" else _EwaldLattice(surface)
            self._robin = self._lattice.robin()
        else:
            self._robin = math.log(4.0) / FOUR_PI + SPHERE_C0
        logger.debug("GreenEvaluator(%s, %s): robin=%.15g", surface.kind, self.method, self._robin)

    # torus helpers
    def _disp(self, x, xi):
        return self.surface.displacement(x, xi)

    # sphere helpers: chord² and stereographic |u|²
    @staticmethod
    def _chord2(x, xi):
        d = np.asarray(x, dtype=float) - np.asarray(xi, dtype=float)
        return np.sum(d * d, axis=-1), d

    @staticmethod
    def _tangent(v, x):
        x = np.asarray(x, dtype=float)
        return v - np.sum(v * x, axis=-1, keepdims=True) * x

    def _check(self, dist):
        if np.any(np.asarray(dist) < _COINCIDENCE):
            raise SingularityError("G(x, ξ) evaluated within 1e-12 of its pole")

    def green(self, x, xi, check=True):
        if self.surface.is_torus:
            z = self._disp(x, xi)
            r = np.linalg.norm(z, axis=-1)
            if check:
                self._check(r)
            if self.method == "ewald":
                return self._lattice.green(z)
            with np.errstate(divide="ignore"):
                return self._lattice.h_near(z) - np.log(r) / TWO_PI
        c2, _ = self._chord2(x, xi)
        if check:
            self._check(np.sqrt(c2))
        with np.errstate(divide="ignore"):
            return -np.log(c2) / FOUR_PI + _SPHERE_CONST

    def green_grad(self, x, xi):
        if self.surface.is_torus:
            z = self._disp(x, xi)
            self._check(np.linalg.norm(z, axis=-1))
            return self._lattice.green_grad(z)
        c2, d = self._chord2(x, xi)
        self._check(np.sqrt(c2))
        return self._tangent(-d / (TWO_PI * c2[..., None]), x)

    def regular_part(self, x, xi):
        if self.surface.is_torus:
            z = self._disp(x, xi)
            r = np.linalg.norm(z, axis=-1)
            far = 1.0 - self.cutoff.chi(r)
            with np.errstate(divide="ignore", invalid="ignore"):
                corr = np.where(far > 0, far * np.log(np.where(r > 0, r, 1.0)), 0.0)
            return self._lattice.h_near(z) - corr / TWO_PI
        c2, _ = self._chord2(x, xi)
        c2 = np.minimum(c2, 4.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = 4.0 * c2 / (4.0 - c2)
            r = np.sqrt(s)
            far = 1.0 - self.cutoff.chi(r)
            near = np.log(4.0 + s) / FOUR_PI + SPHERE_C0
            corr = np.where(far > 0, far * 0.5 * np.log(np.where(s > 0, s, 1.0)), 0.0)
            val = near - corr / TWO_PI
            g = -np.log(np.where(c2 > 0, c2, 1.0)) / FOUR_PI + _SPHERE_CONST
        return np.where(far >= 1.0, g, val)

    def regular_grad(self, x, xi):
        """∇_x H(x, ξ)."""
        if self.surface.is_torus:
            z = self._disp(x, xi)
            r = np.linalg.norm(z, axis=-1)
            chi, dchi, _ = self.cutoff.derivatives(r)
            with np.errstate(divide="ignore", invalid="ignore"):
                rr = np.where(r > 0, r, 1.0)
                f = np.where(chi < 1.0, (-dchi * np.log(rr) + (1.0 - chi) / rr) / rr, 0.0)
            return self._lattice.h_near_grad(z) - f[..., None] * z / TWO_PI
        c2, d = self._chord2(x, xi)
        with np.errstate(divide="ignore", invalid="ignore"):
            cc = np.minimum(c2, 4.0 - 1e-15)
            s = 4.0 * cc / (4.0 - cc)
            r = np.sqrt(s)
            chi, dchi, _ = self.cutoff.derivatives(r)
            ss = np.where(s > 0, s, 1.0)
            dcorr = np.where(chi < 1.0,
                             -dchi / (2 * np.sqrt(ss)) * 0.5 * np.log(ss) + (1.0 - chi) / (2 * ss), 0.0)
            dH_ds = 1.0 / (FOUR_PI * (4.0 + s)) - dcorr / TWO_PI
            dH_dc2 = dH_ds * 16.0 / (4.0 - cc) ** 2
        grad = self._tangent(2.0 * dH_dc2[..., None] * d, x)
        outside = np.asarray(chi <= 0.0)
        if np.any(outside):
            g = self._tangent(-d / (TWO_PI * np.where(c2 > 0, c2, 1.0)[..., None]), x)
            grad = np.where(outside[..., None], g, grad)
        return grad

    def near_regular(self, x, xi):
        """G(x,ξ) + (1/2π)·log|y_ξ(x)| with no cutoff; smooth through x = ξ."""
        if self.surface.is_torus:
            return self._lattice.h_near(self._disp(x, xi))
        c2, _ = self._chord2(x, xi)
        with np.errstate(divide="ignore"):
            s = 4.0 * c2 / (4.0 - np.minimum(c2, 4.0))
        return np.log(4.0 + s) / FOUR_PI + SPHERE_C0

    def robin(self, xi=None):
        """H(ξ, ξ); constant in ξ on both surfaces."""
        return self._robin


# ── Quadrature checks ─────────────────────────────────────────────────────

def single_pole_radius(surface):
    """Widest partition radius around one point: 0.4·shortest period, or chart radius 1."""
    return 0.4 * surface.shortest_period if surface.is_torus else 1.0


def _green_quadrature(evaluator, grid, xi, scale=1e-3):
    r_out = single_pole_radius(evaluator.surface)
    return HybridQuadrature(grid, [xi], 0.1 * r_out, r_out, scales=[scale])


def green_integral(evaluator, grid, xi):
    """∫_S G(x, ξ) dv_g by hybrid quadrature (should vanish)."""
    quad = _green_quadrature(evaluator, grid, xi)
    return float(quad.integrate(lambda x: evaluator.green(x, xi, check=False)))


def weak_identity_defect(evaluator, grid, xi, psi, minus_lap_psi):
    """|∫ G(·,ξ)(−Δψ) − (ψ(ξ) − mean ψ)| for a smooth test function ψ."""
    quad = _green_quadrature(evaluator, grid, xi)
    lhs = quad.integrate(lambda x: evaluator.green(x, xi, check=False) * minus_lap_psi(x))
    mean = float(np.sum(grid.weights * psi(grid.points)) / grid.surface.area)
    rhs = float(psi(np.asarray(xi, dtype=float)[None, :])[0]) - mean
    return abs(float(lhs) - rhs)


def sphere_c0_quadrature(grid, xi=(0.0, 0.0, -1.0)):
    """c₀ from ∫G = 0: minus the mean of −(1/2π)log|u| + (1/4π)log(4+|u|²)."""
    quad = HybridQuadrature(grid, [xi], 0.1, 1.0, scales=[1e-3])
    xi = np.asarray(xi, dtype=float)

    def stereo_part(x):
        c2 = np.sum((x - xi) ** 2, axis=-1)
        return -np.log(c2 / 4.0) / FOUR_PI

    return -float(quad.integrate(stereo_part)) / grid.surface.area
