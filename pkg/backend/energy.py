# backend/energy.py
"""The energy J_λ, its evaluation on the ansatz, the δ-expansion checks, the
reduced energy E_λ = J_λ(W + φ) and the finite-dimensional critical-pair solve.

J_λ(u) = ½∫|∇u|² − λ log∫ke^u on zero-mean u.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from backend.ansatz import (
    Ansatz, BubbleParams, kernel_elements, solve_projected_correction,
)
from backend.errors import (
    BracketError, DomainError, InconsistencyError, InsufficientDataError, StaleSeedError,
    UnsupportedSurfaceError, ZeroMeanError,
)
from backend.landscape import (
    EIGHT_PI, Configuration, coeff_A, coeff_B, evaluate_config, existence_side, grad_phi_m,
    hessian_phi_m, log_k,
)
from backend.orders import extrapolate_limit, fit_order, regression
from backend.surface import PeriodicInterpolant, chart_at, dirichlet_energy, integrate, make_grid

logger = logging.getLogger(__name__)

THIRTY_TWO_PI2 = 32 * math.pi**2
DELTA_STEP = 0.05           # relative step of δ difference quotients
XI_STEP = 1e-3              # chart step of ξ difference quotients
DERIVATIVE_TOL = 1e-5
COEFF_ZERO = 1e-6           # |A|, |B| below this count as vanishing
COEFF_STEP = 1e-4
PAIR_TOL = 1e-8
NEWTON_MAX_ITER = 20
NEWTON_RADIUS = 0.05
REFINE_TOL = 1e-6           # max |∂E_λ| at which the (δ, ξ) refinement stops
REFINE_DELTA_STEP = 1e-2    # relative δ step of the reduced-energy differences
REFINE_MAX_ITER = 8
MIN_SWEEP = 4
SWEEP_WORKERS = 4


def four_point(f, x, h):
    return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)


def parallel_map(fn, items):
    items = list(items)
    with ThreadPoolExecutor(max_workers=max(1, min(len(items), SWEEP_WORKERS))) as executor:
        return list(executor.map(fn, items))


# ── J_λ ───────────────────────────────────────────────────────────────────

def J_lambda(lam, u, data):
    """½∫|∇u|² (spectral) − λ log∫ke^u (grid quadrature)."""
    if not u.is_zero_mean:
        raise ZeroMeanError(f"J_λ is defined on zero-mean functions; mean is {u.mean:.3e}")
    grid = u.grid
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        lk = log_k(data, grid.points, check=False)
        kew = np.exp(np.where(np.isnan(lk), -np.inf, lk) + u.values)
    mass = integrate(grid, kew)
    if not (np.isfinite(mass) and mass > 0):
        raise DomainError(f"∫ke^u = {mass!r} is not a positive finite number")
    return 0.5 * dirichlet_energy(u) - lam * math.log(mass)


def ansatz_energy(params, lam, ansatz=None):
    """J_λ(W) with both integrals by hybrid quadrature."""
    ansatz = ansatz or Ansatz(params)
    mass = ansatz.kew_integral
    if not (np.isfinite(mass) and mass > 0):
        raise DomainError(f"∫ke^W = {mass!r} is not a positive finite number")
    return ansatz.dirichlet() - lam * math.log(mass)


def energy_dW_ddelta(params, lam, ansatz=None, kernels=None):
    """∂_δJ_λ(W) = (1/δ)∫R·PZ, from ∂_δPU_j = −PZ_0j/δ."""
    ansatz = ansatz or Ansatz(params)
    kernels = kernels or kernel_elements(params)
    PZ = kernels.P(kernels.size - 1)
    val = params.quadrature.integrate(lambda x: ansatz.residual(x, lam) * PZ(x))
    return float(val) / params.delta


def check_delta_derivative(params, lam, rel_tol=DERIVATIVE_TOL, step=DELTA_STEP):
    """Analytic ∂_δJ(W) against the four-point difference quotient of J(W)."""
    analytic = energy_dW_ddelta(params, lam)
    h = step * params.delta
    fd = four_point(lambda d: ansatz_energy(params.with_delta(d), lam), params.delta, h)
    if abs(analytic - fd) > rel_tol * (1 + abs(analytic)):
        raise InconsistencyError(
            f"∂_δJ(W) at δ={params.delta:.4g}: chain rule {analytic:.10g}, "
            f"difference quotient {fd:.10g}")
    return analytic, fd


def energy_dd_delta(params, lam, step=DELTA_STEP):
    """∂_δδJ(W) as the difference quotient of the analytic ∂_δJ(W)."""
    return four_point(lambda d: energy_dW_ddelta(params.with_delta(d), lam),
                       params.delta, step * params.delta)


def energy_grad_xi(params, lam, step=XI_STEP):
    """∇_ξJ_λ(W) in chart coordinates at each ξ_j, flattened to 2m entries."""
    s = params.surface
    r0 = min(s.default_r0, s.injectivity_bound)
    base = np.array(params.config.points)
    out = np.empty(2 * params.m)
    for j, xi in enumerate(base):
        chart = chart_at(s, xi, r0)
        for i in range(2):
            def energy_at(t, j=j, i=i, chart=chart):
                y = np.zeros(2)
                y[i] = t
                pts = base.copy()
                pts[j] = chart.from_chart(y)
                return ansatz_energy(params.with_config(Configuration.on(s, pts)), lam)

            out[2 * j + i] = four_point(energy_at, 0.0, step)
    return out


# ── the expansion ─────────────────────────────────────────────────────────

def leading_terms(lam, delta, m, phi):
    """−8πm − λ log(πm) − 32π²φ_m + 2(λ − 8πm) log δ."""
    return (-EIGHT_PI * m - lam * math.log(math.pi * m) - THIRTY_TWO_PI2 * phi
            + 2 * (lam - EIGHT_PI * m) * math.log(delta))


def expansion_theory(lam, delta, m, phi, A, B):
    return leading_terms(lam, delta, m, phi) + A * delta**2 * math.log(delta) - B * delta**2


def energy_derivative_theory(lam, delta, m, A, B, order=1):
    """First or second δ-derivative of the expansion."""
    eps = lam - EIGHT_PI * m
    ld = math.log(delta)
    if order == 1:
        return 2 * eps / delta + 2 * A * delta * ld + (A - 2 * B) * delta
    if order == 2:
        return -2 * eps / delta**2 + 2 * A * ld + 3 * A - 2 * B
    raise DomainError(f"order must be 1 or 2, got {order}")


def lambda_energy_shift(lam, delta, m):
    """J_λ(W) − J_{8πm}(W) = −(λ − 8πm)(−2 log δ + log πm)."""
    return -(lam - EIGHT_PI * m) * (-2 * math.log(delta) + math.log(math.pi * m))


@dataclass(frozen=True)
class LambdaRule:
    """λ(δ) = 8πm + sign·c·δ²|log δ|."""

    sign: int = 1
    c: float = 1.0

    def __post_init__(self):
        if self.sign not in (-1, 0, 1):
            raise DomainError(f"λ-rule sign must be −1, 0 or 1, got {self.sign}")
        if self.c < 0:
            raise DomainError(f"λ-rule constant must be non-negative, got {self.c}")

    def __call__(self, delta, m):
        return EIGHT_PI * m + self.sign * self.c * delta**2 * abs(math.log(delta))


@dataclass(eq=False)
class ExpansionSeries:
    """Measured vs predicted values along a sweep; 2-D for vector quantities."""

    name: str
    measured: np.ndarray
    theory: np.ndarray

    def __post_init__(self):
        self.measured = np.asarray(self.measured, dtype=float)
        self.theory = np.asarray(self.theory, dtype=float)

    @property
    def residuals(self):
        r = np.abs(self.measured - self.theory)
        return r.max(axis=1) if r.ndim == 2 else r


@dataclass(eq=False)
class ExpansionReport:
    deltas: np.ndarray
    lambdas: np.ndarray
    series: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    dropped: list = field(default_factory=list)
    parameter: str = "lambda"

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=float)
        self.lambdas = np.asarray(self.lambdas, dtype=float)

    def add(self, name, measured, theory):
        s = ExpansionSeries(name, measured, theory)
        if len(s.measured) != len(self.deltas):
            raise InsufficientDataError(f"series {name} has {len(s.measured)} points, "
                                        f"sweep has {len(self.deltas)}")
        self.series[name] = s
        return s

    def order(self, name):
        return fit_order(self.deltas, self.series[name].residuals)

    @property
    def orders(self):
        return {name: self.order(name) for name in self.series}

    def table(self):
        cols = {"delta [1]": self.deltas, f"{self.parameter} [1]": self.lambdas}
        for name, s in self.series.items():
            if s.measured.ndim == 2:
                for c in range(s.measured.shape[1]):
                    cols[f"{name}_measured_{c}"] = s.measured[:, c]
                    cols[f"{name}_theory_{c}"] = s.theory[:, c]
            else:
                cols[f"{name}_measured"] = s.measured
                cols[f"{name}_theory"] = s.theory
            cols[f"{name}_residual"] = s.residuals
        return pd.DataFrame(cols)


def _sweep_point(data, config, rule, grid, r0, profile, derivatives, gradient):
    def run(delta):
        params = BubbleParams(data, config, delta, r0, profile, grid)
        lam = rule(delta, config.m)
        ansatz = Ansatz(params)
        out = {"delta": delta, "lam": lam, "J": ansatz_energy(params, lam, ansatz)}
        if derivatives:
            out["d1"] = energy_dW_ddelta(params, lam, ansatz)
            out["d2"] = energy_dd_delta(params, lam)
        if gradient:
            out["grad"] = energy_grad_xi(params, lam)
        logger.debug("expansion point δ=%.4g done", delta)
        return out

    return run


def verify_expansion(data, config, deltas, rule=None, coefficients=None, grid=None, r0=None,
                     profile="quintic", derivatives=True, gradient=True):
    """Measured J_λ(W), ∂_δJ, ∂_δδJ, ∇_ξJ along a δ sweep against the expansion."""
    deltas = sorted((float(d) for d in deltas), reverse=True)
    if len(deltas) < MIN_SWEEP:
        raise InsufficientDataError(f"expansion sweep needs ≥ {MIN_SWEEP} δ values, got {len(deltas)}")
    rule = rule or LambdaRule()
    coeffs = coefficients or evaluate_config(data, config)
    m = config.m
    phi, A, B = coeffs.phi, coeffs.A, coeffs.B
    if grid is None:
        grid = BubbleParams(data, config, deltas[0], r0, profile).grid
    grid.points, grid.q2, grid.weights  # fill the shared caches before the worker threads start

    rows = parallel_map(_sweep_point(data, config, rule, grid, r0, profile, derivatives, gradient),
                        deltas)
    lams = [r["lam"] for r in rows]
    report = ExpansionReport(deltas, lams, meta={"m": m, "phi": phi, "A": A, "B": B})
    report.add("J", [r["J"] for r in rows],
               [expansion_theory(l, d, m, phi, A, B) for l, d in zip(lams, deltas)])
    if derivatives:
        report.add("dJ_ddelta", [r["d1"] for r in rows],
                   [energy_derivative_theory(l, d, m, A, B, 1) for l, d in zip(lams, deltas)])
        report.add("d2J_ddelta2", [r["d2"] for r in rows],
                   [energy_derivative_theory(l, d, m, A, B, 2) for l, d in zip(lams, deltas)])
    if gradient:
        target = -THIRTY_TWO_PI2 * np.asarray(coeffs.grad)
        report.add("grad_xi", [r["grad"] for r in rows], [target] * len(rows))
    logger.info("expansion sweep over %d δ values: orders %s", len(deltas),
                {k: round(v, 3) for k, v in report.orders.items()})
    return report


def regress_coefficients(report):
    """(A_fit, B_fit) from [J − leading]/δ² = A log δ − B."""
    m, phi = report.meta["m"], report.meta["phi"]
    d = report.deltas
    lead = np.array([leading_terms(l, di, m, phi) for l, di in zip(report.lambdas, d)])
    target = (report.series["J"].measured - lead) / d**2
    a, b = regression([np.log(d), np.ones_like(d)], target)
    return float(a), float(-b)


def second_derivative_limit(report):
    """lim δ→0 of ∂_δδJ − 2A log δ + 2(λ − 8πm)/δ², with the predicted 3A − 2B."""
    m, A, B = report.meta["m"], report.meta["A"], report.meta["B"]
    d = report.deltas
    eps = report.lambdas - EIGHT_PI * m
    vals = report.series["d2J_ddelta2"].measured - 2 * A * np.log(d) + 2 * eps / d**2
    return extrapolate_limit(d, vals), 3 * A - 2 * B


# ── reduced energy ────────────────────────────────────────────────────────

@dataclass(eq=False)
class ReducedEnergy:
    lam: float
    delta: float
    config: Configuration
    value: float
    ansatz_value: float
    correction: object

    @property
    def remainder(self):
        """E_λ − J_λ(W)."""
        return self.value - self.ansatz_value


def reduced_E(params, lam, correction=None, ansatz=None):
    """E_λ(δ, ξ) = J_λ(W + φ(δ, ξ)).

    J(W) and the cross term go through the hybrid quadrature, ½∫|∇φ|² is
    spectral, and log∫ke^{W+φ} is taken relative to ∫ke^W.
    """
    ansatz = ansatz or Ansatz(params)
    corr = correction or solve_projected_correction(params, lam, ansatz=ansatz)
    phi_at = PeriodicInterpolant(corr.phi)
    JW = ansatz_energy(params, lam, ansatz)
    cross = -sum(b.pair(phi_at) for b in ansatz.bubbles)
    ratio = params.quadrature.integrate(lambda x: ansatz.kew(x) * np.exp(phi_at(x)))
    ratio = float(ratio) / ansatz.kew_integral
    value = JW + cross + 0.5 * dirichlet_energy(corr.phi) - lam * math.log(ratio)
    return ReducedEnergy(lam, params.delta, params.config, value, JW, corr)


def reduced_model(lam, delta, coefficients, m):
    """Main terms of E_λ from φ_m, A and B (the remainder dropped)."""
    c = coefficients
    return expansion_theory(lam, delta, m, c.phi, c.A, c.B)


# ── critical pair ─────────────────────────────────────────────────────────

def critical_window(lam, m, A, B):
    """I_λ = [m₀/√|log|λ − 8πm||, M] for μ = δ/√|λ − 8πm|."""
    eps = lam - EIGHT_PI * m
    if eps == 0 or abs(eps) >= 1:
        raise DomainError(f"λ − 8πm = {eps:.3g} must lie in (−1, 1)∖{{0}}")
    inv = [abs(c) ** -0.5 for c in (A, B) if c is not None and abs(c) > COEFF_ZERO]
    if not inv:
        raise BracketError("A and B both vanish at the seed; the δ-equation has no scale")
    m0 = 0.5 * min(min(inv), 1.0)
    M = 4.0 * max(inv)
    return m0 / math.sqrt(abs(math.log(abs(eps)))), M


def _mu_equation(eps, A, B):
    """g(μ) = δ∂_δẼ/|λ − 8πm| with δ = μ√|λ − 8πm|."""
    s = math.copysign(1.0, eps)
    root = math.sqrt(abs(eps))

    def g(mu):
        ld = math.log(mu * root)
        return 2 * s + mu * mu * (A * (2 * ld + 1) - 2 * B)

    def dg(mu):
        ld = math.log(mu * root)
        return 2 * mu * (2 * A * ld + 2 * A - 2 * B)

    return g, dg


@dataclass(eq=False)
class CriticalPair:
    """`curvature` is sign(λ − 8πm)·∂_δδE at the pair; `refined` marks a critical point of E_λ."""

    lam: float
    delta: float
    config: Configuration
    mu: float
    interval: tuple
    d_delta: float
    grad_xi: float
    curvature: float
    iterations: int
    A: float
    B: float
    refined: bool = False

    def row(self):
        out = {"lambda": self.lam, "delta": self.delta, "mu": self.mu,
               "mu_lo": self.interval[0], "mu_hi": self.interval[1],
               "d_delta": self.d_delta, "grad_xi": self.grad_xi, "curvature": self.curvature,
               "A": self.A, "B": self.B, "refined": self.refined}
        for j, p in enumerate(self.config.points):
            for c, v in enumerate(p):
                out[f"xi{j + 1}_{c}"] = float(v)
        return out


def coefficient_gradients(data, config, step=COEFF_STEP, grid=None):
    """Central differences of A and B in the charts at ξ_j, flattened to 2m entries."""
    s = data.surface
    r0 = min(s.default_r0, s.injectivity_bound)
    base = np.array(config.points)
    gA = np.empty(2 * config.m)
    gB = np.empty(2 * config.m)
    for j, xi in enumerate(base):
        chart = chart_at(s, xi, r0)
        for i in range(2):
            vals = []
            for t in (step, -step):
                y = np.zeros(2)
                y[i] = t
                pts = base.copy()
                pts[j] = chart.from_chart(y)
                cfg = Configuration.on(s, pts)
                vals.append((coeff_A(data, cfg), coeff_B(data, cfg, grid=grid)))
            gA[2 * j + i] = (vals[0][0] - vals[1][0]) / (2 * step)
            gB[2 * j + i] = (vals[0][1] - vals[1][1]) / (2 * step)
    return gA, gB


def _solve_mu(eps, A, B, lo, hi):
    g, _ = _mu_equation(eps, A, B)
    glo, ghi = g(lo), g(hi)
    if not (np.isfinite(glo) and np.isfinite(ghi)) or glo * ghi > 0:
        side = existence_side(A, B, COEFF_ZERO)
        raise BracketError(
            f"∂_δE has no sign change on I_λ = [{lo:.4g}, {hi:.4g}] "
            f"(λ − 8πm = {eps:.3g}, A = {A:.4g}, B = {B:.4g}; families exist on the "
            f"{side or 'no'} side)")
    return brentq(g, lo, hi, xtol=1e-15, maxiter=200)


def solve_critical_pair(data, lam, seed, coefficients=None, gradients=None, grid=None,
                        full=True, tol=PAIR_TOL, max_iter=NEWTON_MAX_ITER, bubble_grid=None,
                        r0=None, profile="quintic", refine_tol=REFINE_TOL):
    """Critical point (δ*, ξ*) of E_λ near a critical point of φ_m.

    The model energy gives the start: δ(λ, ξ) by bisection in μ over I_λ, then
    Newton in ξ on the envelope gradient −32π²∇φ_m + δ²(log δ·∇A − ∇B). With
    `full` (the default) Newton on central differences of E_λ = J_λ(W + φ)
    moves (δ, ξ) jointly to the zero of ∇E_λ; `full=False` stops at the model pair.
    """
    m = seed.m
    eps = lam - EIGHT_PI * m
    coeffs = coefficients or evaluate_config(data, seed, grid)
    A0, B0 = coeffs.A, coeffs.B
    lo, hi = critical_window(lam, m, A0, B0)
    root = math.sqrt(abs(eps))
    mu = _solve_mu(eps, A0, B0, lo, hi)

    gA, gB = gradients if gradients is not None else coefficient_gradients(data, seed, grid=grid)
    s = data.surface
    r0c = min(s.default_r0, s.injectivity_bound)
    config = seed
    offset = np.zeros(2 * m)
    G = None
    for it in range(1, max_iter + 1):
        A = A0 + float(gA @ offset)
        B = B0 + float(gB @ offset)
        mu = _solve_mu(eps, A, B, lo, hi)
        delta = mu * root
        G = (-THIRTY_TWO_PI2 * grad_phi_m(data, config)
             + delta**2 * (math.log(delta) * gA - gB))
        logger.debug("critical pair iteration %d: |∇_ξE|=%.3e δ=%.6g", it, np.linalg.norm(G), delta)
        if np.linalg.norm(G) < tol:
            break
        H = -THIRTY_TWO_PI2 * hessian_phi_m(data, config)
        try:
            step = np.linalg.solve(H, -G)
        except np.linalg.LinAlgError as e:
            raise StaleSeedError(f"singular ξ-Jacobian at iteration {it}: {e}") from e
        offset = offset + step
        if not np.all(np.isfinite(offset)) or np.linalg.norm(offset) > NEWTON_RADIUS:
            raise StaleSeedError(
                f"ξ-Newton left the seed neighbourhood (|Δξ| = {np.linalg.norm(offset):.3g})")
        charts = [chart_at(s, xi, r0c) for xi in config.points]
        pts = np.array([c.from_chart(y) for c, y in zip(charts, step.reshape(m, 2))])
        config = Configuration.on(s, pts)
    else:
        raise StaleSeedError(f"ξ-Newton did not converge in {max_iter} iterations "
                             f"(|∇_ξE| = {np.linalg.norm(G):.3e})")

    g, dg = _mu_equation(eps, A, B)
    curvature = math.copysign(1.0, eps) * dg(mu) / mu
    if curvature >= 0:
        logger.warning("model energy is not concave in μ at μ*=%.4g (curvature %.3g)", mu, curvature)
    d_delta = abs(eps) * g(mu) / delta
    pair = CriticalPair(lam, delta, config, mu, (lo, hi), abs(d_delta), float(np.linalg.norm(G)),
                        curvature, it, A, B)
    if full:
        pair = _refine_pair(data, pair, bubble_grid, r0, profile, refine_tol)
    logger.info("critical pair at λ=%.8g: δ*=%.6g μ*=%.4g", lam, pair.delta, pair.mu)
    return pair


class ReducedEnergyChart:
    """E_λ as a function of z = (δ, y), y the chart offsets at each ξ_j of `config`."""

    def __init__(self, data, lam, config, grid=None, r0=None, profile="quintic"):
        s = data.surface
        if not s.is_torus:
            raise UnsupportedSurfaceError("the reduced energy needs the torus ansatz")
        self.data, self.lam, self.r0, self.profile = data, lam, r0, profile
        self.grid = grid if grid is not None else make_grid(s, BubbleParams.n)
        rc = min(s.default_r0, s.injectivity_bound)
        self.charts = [chart_at(s, xi, rc) for xi in config.points]

    def config_at(self, y):
        pts = np.array([c.from_chart(v) for c, v in zip(self.charts, np.reshape(y, (-1, 2)))])
        return Configuration.on(self.data.surface, pts)

    def params(self, z):
        return BubbleParams(self.data, self.config_at(z[1:]), float(z[0]), self.r0,
                            self.profile, self.grid)

    def __call__(self, z):
        return reduced_E(self.params(z), self.lam).value

    def steps(self, z):
        return np.concatenate([[REFINE_DELTA_STEP * z[0]], np.full(len(z) - 1, XI_STEP)])

    def derivatives(self, z):
        """∇E_λ by four-point differences, the Hessian by second differences."""
        z = np.asarray(z, dtype=float)
        h = self.steps(z)
        e = np.diag(h)
        n = len(z)
        f0 = self(z)
        grad = np.empty(n)
        hess = np.empty((n, n))
        for i in range(n):
            f = {k: self(z + k * e[i]) for k in (-2, -1, 1, 2)}
            grad[i] = (-f[2] + 8 * f[1] - 8 * f[-1] + f[-2]) / (12 * h[i])
            hess[i, i] = (f[1] - 2 * f0 + f[-1]) / h[i] ** 2
        for i in range(n):
            for j in range(i + 1, n):
                c = (self(z + e[i] + e[j]) - self(z + e[i] - e[j])
                     - self(z - e[i] + e[j]) + self(z - e[i] - e[j]))
                hess[i, j] = hess[j, i] = c / (4 * h[i] * h[j])
        return grad, hess


def _refine_pair(data, pair, grid, r0, profile, tol=REFINE_TOL):
    """Newton on ∇E_λ(δ, ξ) from the model pair, δ kept in [δ/2, 2δ]."""
    energy = ReducedEnergyChart(data, pair.lam, pair.config, grid, r0, profile)
    d0 = pair.delta
    z = np.concatenate([[d0], np.zeros(2 * pair.config.m)])
    grad = None
    for it in range(1, REFINE_MAX_ITER + 1):
        grad, hess = energy.derivatives(z)
        logger.debug("reduced-energy iteration %d: |∂_δE|=%.3e |∇_ξE|=%.3e δ=%.6g",
                     it, abs(grad[0]), np.linalg.norm(grad[1:]), z[0])
        if np.max(np.abs(grad)) < tol:
            break
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError as e:
            raise StaleSeedError(f"singular Hessian of E_λ at iteration {it}: {e}") from e
        z = z + step
        if (not np.all(np.isfinite(z)) or not 0.5 * d0 <= z[0] <= 2 * d0
                or np.linalg.norm(z[1:]) > NEWTON_RADIUS):
            raise StaleSeedError(f"reduced-energy Newton left the model pair's neighbourhood "
                                 f"(δ = {z[0]:.4g}, |Δξ| = {np.linalg.norm(z[1:]):.3g})")
    else:
        raise StaleSeedError(f"reduced-energy Newton did not converge in {REFINE_MAX_ITER} "
                             f"iterations (|∇E_λ| = {np.max(np.abs(grad)):.3e})")
    eps = pair.lam - EIGHT_PI * pair.config.m
    curvature = math.copysign(1.0, eps) * float(hess[0, 0])
    if curvature >= 0:
        logger.warning("E_λ is not concave in μ at δ*=%.4g (curvature %.3g)", z[0], curvature)
    delta = float(z[0])
    return CriticalPair(pair.lam, delta, energy.config_at(z[1:]), delta / math.sqrt(abs(eps)),
                        pair.interval, abs(float(grad[0])), float(np.linalg.norm(grad[1:])),
                        curvature, pair.iterations + it, pair.A, pair.B, refined=True)
