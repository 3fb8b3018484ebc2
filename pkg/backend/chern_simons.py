# backend/chern_simons.py
"""Self-dual Chern–Simons–Higgs vortex condensates on a flat torus, through the
mean-field-type reduction.

With k = e^{u₀}, u₀ = −4πΣn_jG(·, p_j) and N = Σn_j, the equation

    −Δw = ε⁻²ke^w(1 − ke^w) − 4πN/|T|

is rewritten for w = u + c₋(u), u zero-mean, where

    C(u) = 16πN ∫k²e^{2u} / (∫ke^u)²,
    e^{c±(u)} = 8πNε² / [∫ke^u (1 ∓ √(1 − ε²C(u)))].

u is admissible when ε²C(u) ≤ 1. The u-equation is solved with the shared
Newton engine and the condensate is read off the scalar measure
ε⁻²ke^w(1 − ke^w).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from backend.ansatz import Ansatz, BubbleParams
from backend.energy import (
    MIN_SWEEP, ExpansionReport, J_lambda, ansatz_energy, four_point, parallel_map,
)
from backend.errors import (
    BracketError, ConditionViolatedError, DomainError, InadmissibleError, InsufficientDataError,
    NonConvergenceError,
)
from backend.landscape import EIGHT_PI, evaluate_config
from backend.mfsolver import (
    SOLVER_TOL, MAX_ITER, ball_masses, find_peaks, fit_density, grid_log_k, newton_solve,
)
from backend.orders import regression
from backend.surface import Field, dirichlet_energy, integrate, laplacian, make_grid, spectral_multiply

logger = logging.getLogger(__name__)

FOUR_PI = 4 * math.pi
THIRTY_TWO_PI2 = 32 * math.pi**2
DELTA_STEP = 0.05
MASS_RADIUS = 0.1
DEFAULT_N = 256
CONDENSATE_WORKERS = 3


def _even_m(data):
    N = data.N
    if not (N > 0 and float(N / 2).is_integer()):
        raise DomainError(f"the reduction needs an even total multiplicity N, got {N:g}")
    return int(N // 2)


# ── C(u), c±(u) ───────────────────────────────────────────────────────────

def moments(u, data):
    """(∫ke^u, ∫k²e^{2u}) for a grid Field (grid quadrature) or an Ansatz (hybrid quadrature)."""
    if isinstance(u, Ansatz):
        a = u.kew_integral
        b = float(u.params.quadrature.integrate(lambda x: u.kew(x) ** 2))
    else:
        kew = np.exp(grid_log_k(data, u.grid) + u.values)
        a, b = integrate(u.grid, kew), integrate(u.grid, kew * kew)
    if not (np.isfinite(a) and a > 0 and np.isfinite(b)):
        raise DomainError(f"∫ke^u = {a!r} is not a positive finite number")
    return a, b


def C_of(u, data):
    a, b = moments(u, data)
    return FOUR_PI * 4 * data.N * b / (a * a)


def _root(eps, C):
    x = eps * eps * C
    if x > 1:
        raise InadmissibleError(f"ε²C(u) = {x:.6g} > 1: u lies outside the admissible set")
    return x, math.sqrt(1.0 - x)


def c_minus(u, data, eps):
    """Non-topological root: e^{c₋} = 8πNε²/[∫ke^u(1 + √(1 − ε²C))]."""
    a, b = moments(u, data)
    _, s = _root(eps, FOUR_PI * 4 * data.N * b / (a * a))
    return math.log(EIGHT_PI * data.N * eps * eps) - math.log(a) - math.log1p(s)


def c_plus(u, data, eps):
    """Topological root, with 1 − √(1 − x) = x/(1 + √(1 − x))."""
    a, b = moments(u, data)
    x, s = _root(eps, FOUR_PI * 4 * data.N * b / (a * a))
    if x == 0:
        raise InadmissibleError("ε²C(u) = 0: the topological root is at infinity")
    return math.log(EIGHT_PI * data.N * eps * eps) - math.log(a) - math.log(x / (1 + s))


def identity_residual(u, data, eps, c):
    """Relative defect of e^c∫ke^u − e^{2c}∫k²e^{2u} = 4πNε²."""
    a, b = moments(u, data)
    target = FOUR_PI * data.N * eps * eps
    return abs(math.exp(c) * a - math.exp(2 * c) * b - target) / target


# ── energies ──────────────────────────────────────────────────────────────

def _singular_constants(data, eps, area):
    N = data.N
    return FOUR_PI * N * math.log(EIGHT_PI * N * eps * eps) + area / (2 * eps * eps)


def I_tilde(w, data, eps):
    """½∫|∇w|² + (1/2ε²)∫(ke^w − 1)² + (4πN/|T|)∫w on the grid."""
    grid = w.grid
    kew = np.exp(grid_log_k(data, grid) + w.values)
    area = grid.surface.area
    return (0.5 * dirichlet_energy(w) + integrate(grid, (kew - 1) ** 2) / (2 * eps * eps)
            + FOUR_PI * data.N / area * integrate(grid, w))


def _J(u, data):
    lam = FOUR_PI * data.N
    if isinstance(u, Ansatz):
        return ansatz_energy(u.params, lam, u)
    return J_lambda(lam, u, data)


def I_eps_regular(u, data, eps, J=None, C=None):
    """I_ε(u) − 4πN log(8πNε²) − |T|/2ε²."""
    N = data.N
    J = _J(u, data) if J is None else J
    C = C_of(u, data) if C is None else C
    _, s = _root(eps, C)
    return J - FOUR_PI * N * math.log1p(s) - FOUR_PI * N / (1 + s) - 2 * math.pi * N


def I_eps(u, data, eps):
    """I_ε(u) = Ĩ_ε(u + c₋(u)) on zero-mean u."""
    area = data.surface.area
    return I_eps_regular(u, data, eps) + _singular_constants(data, eps, area)


def small_eps_limit(data):
    """lim_{ε→0} of I_ε_regular − J_{4πN}: −4πN log 2 − 4πN."""
    return -FOUR_PI * data.N * (math.log(2) + 1)


# ── the u-equation ────────────────────────────────────────────────────────

class CSProblem:
    """Preconditioned u-equation Φ(u) = −u + (−Δ)^{-1}[4πN(P₁ − 1/|T|) + K(P₁ − P₂)],

    P₁ = ke^u/∫ke^u, P₂ = k²e^{2u}/∫k²e^{2u}, K = 4πNε²C/(1 + √(1 − ε²C))².
    """

    def __init__(self, data, grid, eps):
        if not eps > 0:
            raise DomainError(f"ε must be positive, got {eps}")
        if not data.N > 0:
            raise DomainError("the Chern–Simons equation needs at least one vortex point")
        self.data, self.grid, self.eps = data, grid, float(eps)
        self.area = grid.surface.area
        self.lam = FOUR_PI * data.N
        self.log_k = grid_log_k(data, grid)
        q2 = grid.q2
        with np.errstate(divide="ignore"):
            self._inv_lap = np.where(q2 > 0, 1.0 / q2, 0.0)
        self._u, self._parts = None, None

    def parts(self, u):
        if u is self._u:
            return self._parts
        e = self.log_k + u
        k1 = np.exp(e - np.max(e))
        k2 = k1 * k1
        a, b = integrate(self.grid, k1), integrate(self.grid, k2)
        if not (np.isfinite(a) and a > 0):
            raise DomainError(f"∫ke^u = {a!r} is not a positive finite number")
        C = FOUR_PI * 4 * self.data.N * b / (a * a)
        x, s = _root(self.eps, C)
        K = self.lam * x / (1 + s) ** 2
        self._u, self._parts = u, (k1 / a, k2 / b, x, s, K)
        return self._parts

    def rhs(self, u):
        P1, P2, _, _, K = self.parts(u)
        return self.lam * (P1 - 1.0 / self.area) + K * (P1 - P2)

    def residual(self, u):
        return -u + spectral_multiply(self.grid, self.rhs(u), self._inv_lap)

    def jvp(self, u, v):
        P1, P2, x, s, K = self.parts(u)
        v = v - np.mean(v)
        m1, m2 = integrate(self.grid, P1 * v), integrate(self.grid, P2 * v)
        dP1 = P1 * (v - m1)
        dP2 = 2 * P2 * (v - m2)
        dK = self.lam * ((1 + s) + x / s) / (1 + s) ** 3 * 2 * x * (m2 - m1)
        d = self.lam * dP1 + dK * (P1 - P2) + K * (dP1 - dP2)
        return -v + spectral_multiply(self.grid, d, self._inv_lap)

    def raw_residual(self, u):
        return laplacian(Field(self.grid, u)).values + self.rhs(u)


def csmf_residual(u, data, eps):
    """Δu + 4πN(P₁ − 1/|T|) + K(P₁ − P₂) at the nodes."""
    return Field(u.grid, CSProblem(data, u.grid, eps).raw_residual(np.asarray(u.values)))


@dataclass(eq=False)
class CSState:
    eps: float
    data: object
    u: Field

    @property
    def grid(self):
        return self.u.grid

    @property
    def N(self):
        return self.data.N

    @property
    def m(self):
        return self.N / 2

    @cached_property
    def C(self):
        return C_of(self.u, self.data)

    @property
    def admissible(self):
        return self.eps**2 * self.C <= 1

    @cached_property
    def c_minus(self):
        return c_minus(self.u, self.data, self.eps)

    @property
    def w(self):
        return self.u + self.c_minus

    @property
    def identity_residual(self):
        return identity_residual(self.u, self.data, self.eps, self.c_minus)

    @cached_property
    def kew(self):
        """ke^w at the nodes (e^w of the original vortex equation)."""
        return np.exp(grid_log_k(self.data, self.grid) + self.w.values)

    @property
    def measure(self):
        """ε⁻²ke^w(1 − ke^w)."""
        return Field(self.grid, self.kew * (1 - self.kew) / self.eps**2)

    def w_residual(self):
        """Δw + ε⁻²ke^w(1 − ke^w) − 4πN/|T|."""
        return laplacian(self.w) + self.measure - FOUR_PI * self.N / self.grid.surface.area


def solve_csmf(data, eps, initial, tol=SOLVER_TOL, max_iter=MAX_ITER):
    """Newton on the u-equation from `initial`; returns (CSState, NewtonOutcome)."""
    grid = initial.grid
    problem = CSProblem(data, grid, eps)
    u0 = np.asarray(initial.values, dtype=float)
    u0 = u0 - initial.mean
    try:
        out = newton_solve(problem.residual, problem.jvp, u0, tol, max_iter,
                           label=f"Chern–Simons Newton at ε={eps:.4g}")
    except NonConvergenceError as e:
        raise type(e)(f"Chern–Simons solve failed for ε={eps:.4g}: {e}",
                      iterations=e.iterations, last_ratio=e.last_ratio) from e
    u = out.x - np.mean(out.x)
    state = CSState(float(eps), data, Field(grid, u))
    logger.info("Chern–Simons solve at ε=%.4g: %d iterations, ‖Φ‖∞=%.2e, ε²C=%.3g",
                eps, out.iterations, out.norm, eps**2 * state.C)
    return state, out


# ── the expansion of I_ε(W) ───────────────────────────────────────────────

@dataclass(frozen=True)
class EpsRule:
    """ε(δ) = c·δ²."""

    c: float = 1.0

    def __post_init__(self):
        if not self.c > 0:
            raise DomainError(f"ε-rule constant must be positive, got {self.c}")

    def __call__(self, delta):
        return self.c * delta * delta


def cs_regular_theory(eps, delta, m, phi, A, B, Btilde):
    """Regular part of −16πm + 8πm log(8ε²) + |T|/2ε² − 32π²φ + Aδ² log δ − Bδ² + B̃ε²/δ²."""
    return (-16 * math.pi * m - EIGHT_PI * m * math.log(2 * math.pi * m) - THIRTY_TWO_PI2 * phi
            + A * delta**2 * math.log(delta) - B * delta**2 + Btilde * eps**2 / delta**2)


def cs_expansion_theory(eps, delta, m, phi, A, B, Btilde, area):
    return (-16 * math.pi * m + EIGHT_PI * m * math.log(8 * eps * eps) + area / (2 * eps * eps)
            - THIRTY_TWO_PI2 * phi + A * delta**2 * math.log(delta) - B * delta**2
            + Btilde * eps**2 / delta**2)


def cs_derivative_theory(eps, delta, A, B, Btilde):
    """∂_δ of the expansion at fixed ε."""
    return A * delta * (2 * math.log(delta) + 1) - 2 * B * delta - 2 * Btilde * eps**2 / delta**3


def _regular_at(params, data, eps):
    ansatz = Ansatz(params)
    a, b = moments(ansatz, data)
    C = FOUR_PI * 4 * data.N * b / (a * a)
    return I_eps_regular(ansatz, data, eps, J=ansatz_energy(params, FOUR_PI * data.N, ansatz), C=C), C


def verify_cs_expansion(data, config, deltas, rule=None, coefficients=None, grid=None, r0=None,
                        profile="quintic", derivatives=True):
    """I_ε(W), C(W) and ∂_δI_ε(W) along a δ sweep against the small-ε expansion.

    Inadmissible sweep points (ε²C(W) > 1) are logged and dropped.
    """
    m = _even_m(data)
    if config.m != m:
        raise DomainError(f"configuration has {config.m} points, N/2 = {m}")
    deltas = sorted((float(d) for d in deltas), reverse=True)
    rule = rule or EpsRule()
    coeffs = coefficients or evaluate_config(data, config)
    phi, A, B, Bt = coeffs.phi, coeffs.A, coeffs.B, coeffs.Btilde
    if grid is None:
        grid = BubbleParams(data, config, deltas[0], r0, profile).grid
    grid.points, grid.q2, grid.weights  # fill the shared caches before the worker threads start

    def run(delta):
        eps = rule(delta)
        params = BubbleParams(data, config, delta, r0, profile, grid)
        try:
            value, C = _regular_at(params, data, eps)
        except InadmissibleError as e:
            logger.warning("dropping δ=%.4g (ε=%.3g): %s", delta, eps, e)
            return None
        out = {"delta": delta, "eps": eps, "I": value, "C": C}
        if derivatives:
            out["d1"] = four_point(lambda d: _regular_at(params.with_delta(d), data, eps)[0],
                                    delta, DELTA_STEP * delta)
        return out

    rows = parallel_map(run, deltas)
    dropped = [d for d, r in zip(deltas, rows) if r is None]
    rows = [r for r in rows if r is not None]
    if len(rows) < MIN_SWEEP:
        raise InsufficientDataError(f"{len(rows)} admissible sweep points, need ≥ {MIN_SWEEP}")
    d = [r["delta"] for r in rows]
    e = [r["eps"] for r in rows]
    report = ExpansionReport(d, e, meta={"m": m, "phi": phi, "A": A, "B": B, "Btilde": Bt,
                                         "eps_c": rule.c},
                             dropped=dropped, parameter="eps")
    report.add("I", [r["I"] for r in rows],
               [cs_regular_theory(ei, di, m, phi, A, B, Bt) for ei, di in zip(e, d)])
    report.add("C_ratio", [r["C"] * math.pi * m * di**2 / Bt for r, di in zip(rows, d)],
               np.ones(len(rows)))
    if derivatives:
        report.add("dI_ddelta", [r["d1"] for r in rows],
                   [cs_derivative_theory(ei, di, A, B, Bt) for ei, di in zip(e, d)])
    logger.info("Chern–Simons sweep over %d δ values (ε = %.3gδ²): orders %s", len(rows), rule.c,
                {k: round(v, 3) for k, v in report.orders.items()})
    return report


def regress_cs_coefficients(reports):
    """(A_fit, B_fit, B̃_fit) from I_reg − main terms = Aδ² log δ − Bδ² + B̃ε²/δ², across ε rules."""
    cols, target = [[], [], []], []
    for rep in reports:
        m, phi = rep.meta["m"], rep.meta["phi"]
        d, e = rep.deltas, rep.lambdas
        base = -16 * math.pi * m - EIGHT_PI * m * math.log(2 * math.pi * m) - THIRTY_TWO_PI2 * phi
        target.extend(rep.series["I"].measured - base)
        cols[0].extend(d**2 * np.log(d))
        cols[1].extend(d**2)
        cols[2].extend(e**2 / d**2)
    a, b, bt = regression(cols, target)
    return float(a), float(-b), float(bt)


# ── condensates ───────────────────────────────────────────────────────────

def condensate_delta(eps, B, Btilde, A=0.0):
    """Zero of ∂_δ[Aδ² log δ − Bδ² + B̃ε²/δ²]; δ = √ε(B̃/|B|)^{1/4} when A = 0."""
    if not B < 0:
        raise ConditionViolatedError(f"B = {B:.6g} ≥ 0: no condensate scale")
    d0 = math.sqrt(eps) * (Btilde / -B) ** 0.25
    if A == 0:
        return d0

    def g(d):
        return A * d**4 * (2 * math.log(d) + 1) - 2 * B * d**4 - 2 * Btilde * eps**2

    lo, hi = d0 / 4, min(4 * d0, 1.0)
    if g(lo) * g(hi) > 0:
        raise BracketError(f"no condensate scale in [{lo:.3g}, {hi:.3g}] at ε={eps:.3g}")
    return brentq(g, lo, hi, xtol=1e-15)


@dataclass(eq=False)
class Condensate:
    state: CSState
    delta: float
    A: float
    B: float
    Btilde: float
    residual: float
    raw_residual: float
    iterations: int
    peaks: np.ndarray
    masses: np.ndarray
    total: float
    sup_kew: float
    fit: object = None

    @property
    def eps(self):
        return self.state.eps

    def row(self):
        out = {"eps [1]": self.eps, "delta_model [1]": self.delta,
               "delta_fit [1]": self.fit.delta if self.fit else math.nan,
               "residual [1]": self.residual, "raw_residual [1]": self.raw_residual,
               "iterations": self.iterations, "eps2C [1]": self.eps**2 * self.state.C,
               "c_minus [1]": self.state.c_minus,
               "identity_residual [1]": self.state.identity_residual,
               "total_mass [1]": self.total, "sup_kew [1]": self.sup_kew,
               "A": self.A, "B": self.B, "Btilde": self.Btilde}
        for j, (q, mass) in enumerate(zip(self.peaks, self.masses)):
            out[f"peak{j + 1}_x [1]"] = float(q[0])
            out[f"peak{j + 1}_y [1]"] = float(q[1])
            out[f"mass{j + 1} [1]"] = float(mass)
        return out


def build_condensate(data, eps, seed, coefficients=None, grid=None, tol=SOLVER_TOL,
                     max_iter=MAX_ITER, radius=MASS_RADIUS):
    """Non-topological condensate concentrating at the critical configuration `seed`.

    Requires B(ξ) < 0. Starts Newton from W(δ, ξ) with δ from the reduced
    energy −Bδ² + B̃ε²/δ² (plus the A-term).
    """
    m = _even_m(data)
    if seed.m != m:
        raise DomainError(f"seed has {seed.m} points, N/2 = {m}")
    coeffs = coefficients or evaluate_config(data, seed)
    if not coeffs.B < 0:
        raise ConditionViolatedError(
            f"B(ξ) = {coeffs.B:.6g} ≥ 0 at the seed; the construction needs B < 0")
    delta = condensate_delta(eps, coeffs.B, coeffs.Btilde, coeffs.A)
    grid = grid or make_grid(data.surface, DEFAULT_N)
    W = Ansatz(BubbleParams(data, seed, delta, grid=grid)).field
    start = CSState(float(eps), data, W.centered())
    if not start.admissible:
        raise InadmissibleError(f"ε²C(W) = {eps**2 * start.C:.4g} > 1 at δ={delta:.4g}")

    state, out = solve_csmf(data, eps, start.u, tol, max_iter)
    if not state.admissible:
        raise InadmissibleError(f"solution left the admissible set: ε²C = {eps**2 * state.C:.4g}")
    mu = state.measure.values
    peaks = find_peaks(grid, mu, radius)
    fit = None
    if len(peaks):
        try:
            fit = fit_density(grid, mu, peaks[0])
        except DomainError as e:
            logger.warning("condensate fit skipped at ε=%.3g: %s", eps, e)
    problem = CSProblem(data, grid, eps)
    cond = Condensate(state, delta, coeffs.A, coeffs.B, coeffs.Btilde, out.norm,
                      float(np.max(np.abs(problem.raw_residual(state.u.values)))), out.iterations,
                      peaks, ball_masses(grid, mu, peaks, radius), integrate(grid, mu),
                      float(np.max(state.kew)), fit)
    logger.info("condensate at ε=%.3g: δ=%.4g, masses %s, sup ke^w=%.3g", eps, delta,
                np.round(cond.masses, 4), cond.sup_kew)
    return cond


def condensate_sweep(data, eps_list, seed, coefficients=None, grid=None, **kwargs):
    """Independent condensates for each ε (in parallel); coefficients computed once."""
    coeffs = coefficients or evaluate_config(data, seed)
    grid = grid or make_grid(data.surface, DEFAULT_N)
    grid.points, grid.q2, grid.weights
    eps_list = [float(e) for e in eps_list]
    with ThreadPoolExecutor(max_workers=max(1, min(len(eps_list), CONDENSATE_WORKERS))) as executor:
        return list(executor.map(
            lambda e: build_condensate(data, e, seed, coeffs, grid, **kwargs), eps_list))


def scaling_slope(condensates):
    """Slope of log δ against log ε, δ from the bubble fit where available."""
    if len(condensates) < 2:
        raise InsufficientDataError("the δ(ε) slope needs at least two condensates")
    eps = np.array([c.eps for c in condensates])
    d = np.array([c.fit.delta if c.fit else c.delta for c in condensates])
    slope, _ = np.polyfit(np.log(eps), np.log(d), 1)
    return float(slope)


def condensate_table(condensates):
    return pd.DataFrame([c.row() for c in condensates])
