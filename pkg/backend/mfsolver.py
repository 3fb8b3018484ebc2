# backend/mfsolver.py
"""Full nonlinear solves of Δu + λ(ke^u/∫ke^u − 1/|S|) = 0 on the flat torus.

Newton runs on the preconditioned residual

    Φ(u) = −u + (−Δ)^{-1}[λ(ke^u/∫ke^u − 1/|S|)]

over zero-mean node values, with GMRES inner solves and Armijo backtracking.
Φ and F = Δu + λ(ke^u/∫ke^u − 1/|S|) vanish together; both sup-norms are
reported, convergence is decided on Φ.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.optimize import least_squares
from scipy.sparse.linalg import LinearOperator, gmres

from backend.ansatz import Ansatz, BubbleParams, solve_projected_correction
from backend.errors import (
    BranchEndError, ContinuationNeededError, DomainError, NonConvergenceError,
    UnsupportedSurfaceError,
)
from backend.landscape import EIGHT_PI, log_k
from backend.surface import Field, integrate, laplacian, spectral_multiply

logger = logging.getLogger(__name__)

SOLVER_TOL = 1e-10
MAX_ITER = 60
FORCING_MAX = 0.1
GMRES_RESTART = 80
GMRES_CYCLES = 10
STALL_RATIO = 0.5           # GMRES relative residual above this → near-singular Jacobian
ARMIJO_C = 1e-4
ENERGY_ROUNDING = 1e-13     # relative J change below which descent falls back to ‖Φ‖∞
MIN_STEP_LENGTH = 1.0 / 1024
MIN_LAMBDA_STEP = 1e-6
STOP_DISTANCE = 5e-3
PEAK_FACTOR = 10.0
PEAK_WINDOW = 5
REPORT_RADIUS = 0.1
FAR_RADIUS = 0.2
FIT_RADIUS = 5.0            # fit disk in units of δ_fit
FIT_MIN_NODES = 3           # ... but at least this many grid spacings
DESCENT_MAX_ITER = 500
BRANCH_WORKERS = 4


def _sup(values):
    return float(np.max(np.abs(values)))


def _l2(values):
    return float(np.sqrt(np.mean(np.square(values))))


# ── generic Newton engine ─────────────────────────────────────────────────

@dataclass(eq=False)
class NewtonOutcome:
    x: np.ndarray
    residual: np.ndarray
    norm: float
    iterations: int
    history: list = field(default_factory=list)


def _line_search(residual, u, r, step, tol):
    base = _l2(r)
    t = 1.0
    while t >= MIN_STEP_LENGTH:
        trial = u + t * step
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                rt = residual(trial)
        except DomainError:
            rt = None
        if rt is not None and np.all(np.isfinite(rt)):
            if _l2(rt) <= (1 - ARMIJO_C * t) * base or _sup(rt) < tol:
                return trial, rt, t
        t *= 0.5
    return None


def newton_solve(residual, jvp, u0, tol=SOLVER_TOL, max_iter=MAX_ITER, label="Newton"):
    """Inexact Newton for residual(u) = 0.

    `residual(u)` and `jvp(u, v)` act on arrays shaped like u0. Each step is a
    GMRES solve with forcing term min(0.1, ‖r‖∞), globalised by Armijo
    backtracking on the mean-square residual. Converged when ‖r‖∞ < tol.
    """
    u = np.array(u0, dtype=float)
    shape, size = u.shape, u.size
    r = residual(u)
    norm = _sup(r)
    history = [norm]
    for it in range(max_iter + 1):
        if norm < tol:
            logger.debug("%s converged in %d iterations: ‖r‖∞=%.3e", label, it, norm)
            return NewtonOutcome(u, r, norm, it, history)
        if it == max_iter:
            break

        def matvec(v, u=u):
            return np.ravel(jvp(u, np.reshape(v, shape)))

        J = LinearOperator((size, size), matvec=matvec, dtype=float)
        b = -np.ravel(r)
        step, _ = gmres(J, b, rtol=min(FORCING_MAX, norm), atol=0.0,
                        restart=GMRES_RESTART, maxiter=GMRES_CYCLES)
        linear = np.linalg.norm(J.matvec(step) - b) / np.linalg.norm(b)
        if not linear <= STALL_RATIO:
            raise ContinuationNeededError(
                f"{label}: GMRES stalled at relative residual {linear:.3e} "
                f"(iteration {it}); the Jacobian is near-singular",
                iterations=it, last_ratio=float(linear))
        found = _line_search(residual, u, r, step.reshape(shape), tol)
        if found is None:
            raise NonConvergenceError(
                f"{label}: line search failed at iteration {it} (‖r‖∞={norm:.3e})",
                iterations=it, last_ratio=history[-1] / history[-2] if it else None)
        u, r, t = found
        norm = _sup(r)
        history.append(norm)
        logger.debug("%s iteration %d: ‖r‖∞=%.3e step=%.3g GMRES rel=%.1e",
                     label, it + 1, norm, t, linear)
    raise NonConvergenceError(
        f"{label} did not converge in {max_iter} iterations (‖r‖∞={norm:.3e})",
        iterations=max_iter, last_ratio=history[-1] / history[-2] if len(history) > 1 else None)


# ── the mean-field problem on a grid ──────────────────────────────────────

def grid_log_k(data, grid):
    """log k at the nodes, −∞ where k vanishes."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        lk = log_k(data, grid.points, check=False)
    return np.where(np.isnan(lk), -np.inf, lk)


class MeanFieldProblem:
    """Φ, its Jacobian and the raw residual F at fixed λ on zero-mean node values."""

    def __init__(self, data, grid, lam):
        if not grid.surface.is_torus:
            raise UnsupportedSurfaceError("nonlinear solves are implemented on the flat torus only")
        if not lam > 0:
            raise DomainError(f"λ must be positive, got {lam}")
        self.data, self.grid, self.lam = data, grid, float(lam)
        self.area = grid.surface.area
        self.log_k = grid_log_k(data, grid)
        q2 = grid.q2
        with np.errstate(divide="ignore"):
            self._inv_lap = np.where(q2 > 0, 1.0 / q2, 0.0)
        self._u, self._rho = None, None

    def density(self, u):
        """λke^u/∫ke^u, shift-invariant in u."""
        if u is self._u:
            return self._rho
        e = self.log_k + u
        kew = np.exp(e - np.max(e))
        mass = integrate(self.grid, kew)
        if not (np.isfinite(mass) and mass > 0):
            raise DomainError(f"∫ke^u = {mass!r} is not a positive finite number")
        self._u, self._rho = u, self.lam * kew / mass
        return self._rho

    def log_mass(self, u):
        e = self.log_k + u
        top = float(np.max(e))
        return top + math.log(integrate(self.grid, np.exp(e - top)))

    def residual(self, u):
        rho = self.density(u)
        return -u + spectral_multiply(self.grid, rho - self.lam / self.area, self._inv_lap)

    def jvp(self, u, v):
        """DΦ(u)v = −v + (−Δ)^{-1}[ρ(v − ⟨v⟩_ρ)]."""
        rho = self.density(u)
        v = v - np.mean(v)
        weighted = integrate(self.grid, rho * v) / self.lam
        return -v + spectral_multiply(self.grid, rho * (v - weighted), self._inv_lap)

    def raw_residual(self, u):
        rho = self.density(u)
        lap = laplacian(Field(self.grid, u)).values
        return lap + rho - self.lam / self.area


# ── solve ─────────────────────────────────────────────────────────────────

@dataclass(eq=False)
class SolveResult:
    lam: float
    u: Field
    data: object
    residual: float
    raw_residual: float
    iterations: int
    report: "ConcentrationReport" = None
    fit: "BubbleFit" = None

    @property
    def grid(self):
        return self.u.grid

    @cached_property
    def problem(self):
        return MeanFieldProblem(self.data, self.grid, self.lam)

    @property
    def density(self):
        return Field(self.grid, self.problem.density(np.asarray(self.u.values)))

    @property
    def log_mass(self):
        return self.problem.log_mass(np.asarray(self.u.values))


def _start_values(initial):
    values = np.asarray(initial.values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise DomainError("initial guess has non-finite values")
    return values - initial.mean


def _diagnose(result):
    result.report = concentration_report(result)
    if len(result.report.peaks):
        try:
            result.fit = fit_bubble(result, result.report.peaks[0])
        except DomainError as e:
            logger.warning("bubble fit skipped at λ=%.8g: %s", result.lam, e)
    return result


def solve(lam, data, initial, tol=SOLVER_TOL, max_iter=MAX_ITER, diagnose=True):
    """Newton solve at λ from `initial` (any gauge; the mean is removed)."""
    grid = initial.grid
    problem = MeanFieldProblem(data, grid, lam)
    u0 = _start_values(initial)
    try:
        out = newton_solve(problem.residual, problem.jvp, u0, tol, max_iter,
                           label=f"mean-field Newton at λ={lam:.8g}")
    except ContinuationNeededError:
        raise
    except NonConvergenceError as e:
        raise NonConvergenceError(f"Newton failed for λ={lam:.8g}: {e}",
                                  iterations=e.iterations, last_ratio=e.last_ratio) from e
    u = out.x - np.mean(out.x)
    result = SolveResult(float(lam), Field(grid, u), data, out.norm,
                         _sup(problem.raw_residual(u)), out.iterations)
    logger.info("solved λ=%.8g in %d iterations: ‖Φ‖∞=%.2e ‖F‖∞=%.2e",
                lam, out.iterations, result.residual, result.raw_residual)
    return _diagnose(result) if diagnose else result


def ansatz_initial(data, config, delta, lam, grid, correction=True):
    """W + φ(δ, ξ) on `grid`, the starting point of a branch near 8πm."""
    params = BubbleParams(data, config, delta, grid=grid)
    ansatz = Ansatz(params)
    u = ansatz.field.values
    if correction:
        try:
            u = u + solve_projected_correction(params, lam, ansatz=ansatz).phi.values
        except NonConvergenceError as e:
            logger.warning("starting from W alone at δ=%.4g: %s", delta, e)
    return Field(grid, u - np.mean(u))


def gradient_descent(lam, data, u0, tol=SOLVER_TOL, max_iter=DESCENT_MAX_ITER):
    """H¹ gradient flow u ← u + tΦ(u) with backtracking on J_λ; a minimiser for λ < 8π."""
    grid = u0.grid
    problem = MeanFieldProblem(data, grid, lam)

    def energy(u):
        return 0.5 * _dirichlet(grid, u) - problem.lam * problem.log_mass(u)

    u = _start_values(u0)
    J = energy(u)
    for it in range(max_iter + 1):
        g = problem.residual(u)
        norm = _sup(g)
        if norm < tol:
            result = SolveResult(float(lam), Field(grid, u), data, norm,
                                 _sup(problem.raw_residual(u)), it)
            logger.info("gradient descent at λ=%.8g: %d steps, J=%.10g", lam, it, J)
            return _diagnose(result)
        if it == max_iter:
            break
        slope = _dirichlet(grid, g)
        t = 1.0
        while t >= MIN_STEP_LENGTH:
            trial = u + t * g
            Jt = energy(trial)
            if Jt <= J - ARMIJO_C * t * slope:
                break
            flat = abs(Jt - J) <= ENERGY_ROUNDING * max(1.0, abs(J))
            if flat and _sup(problem.residual(trial)) < norm:
                break
            t *= 0.5
        else:
            raise NonConvergenceError(f"gradient descent stalled at λ={lam:.8g} (‖Φ‖∞={norm:.3e})",
                                      iterations=it)
        u, J = trial - np.mean(trial), Jt
    raise NonConvergenceError(
        f"gradient descent did not converge in {max_iter} steps at λ={lam:.8g} (‖Φ‖∞={norm:.3e})",
        iterations=max_iter)


def _dirichlet(grid, u):
    return -integrate(grid, u * laplacian(Field(grid, u)).values)


# ── continuation ──────────────────────────────────────────────────────────

def distance_to_critical(lam):
    """Distance of λ to the nearest positive multiple of 8π."""
    m = max(1, round(lam / EIGHT_PI))
    return abs(lam - EIGHT_PI * m)


def _truncate_path(path, stop_distance):
    kept = []
    for lam in path:
        if distance_to_critical(lam) < stop_distance * (1 - 1e-12):
            logger.warning("continuation stops before λ=%.8g: within %.3g of 8πℕ",
                           lam, stop_distance)
            break
        kept.append(float(lam))
    return kept


def continue_in_lambda(data, seed, path, min_step=MIN_LAMBDA_STEP, stop_distance=STOP_DISTANCE,
                       tol=SOLVER_TOL, max_iter=MAX_ITER):
    """Natural-parameter continuation through the λ values of `path`.

    `seed` is a SolveResult (branch start) or a Field (solved at path[0]).
    Each step is warm-started with a secant predictor; failed steps are halved
    until they fall below `min_step`, which ends the branch.
    """
    path = _truncate_path(path, stop_distance)
    if not path:
        raise DomainError("empty λ path after applying the stop distance")
    results = []
    if isinstance(seed, SolveResult):
        current, previous = seed, None
    else:
        current = solve(path[0], data, seed, tol, max_iter)
        results.append(current)
        path, previous = path[1:], None

    for target in path:
        lam = current.lam
        while lam != target:
            h = target - lam
            while True:
                trial = target if h == target - lam else lam + h
                guess = current.u.values
                if previous is not None and previous.lam != current.lam:
                    slope = (current.u.values - previous.u.values) / (current.lam - previous.lam)
                    guess = guess + h * slope
                try:
                    nxt = solve(trial, data, Field(current.grid, guess), tol, max_iter,
                                diagnose=abs(trial - target) < 1e-14)
                    break
                except (NonConvergenceError, DomainError) as e:
                    h *= 0.5
                    logger.warning("halving λ step to %.3g at λ=%.8g: %s", h, lam, e)
                    if abs(h) < min_step:
                        raise BranchEndError(
                            f"branch ended near λ={lam:.8g}: step below {min_step:g}",
                            results) from e
            previous, current, lam = current, nxt, nxt.lam
        results.append(current)
    return results


def continue_branches(data, seeds, path, **kwargs):
    """Independent branches in parallel; results in seed order."""
    seeds = list(seeds)
    with ThreadPoolExecutor(max_workers=max(1, min(len(seeds), BRANCH_WORKERS))) as executor:
        futures = [executor.submit(continue_in_lambda, data, s, path, **kwargs) for s in seeds]
        return [f.result() for f in futures]


# ── concentration diagnostics ─────────────────────────────────────────────

@dataclass(eq=False)
class ConcentrationReport:
    lam: float
    radius: float
    peaks: np.ndarray
    masses: np.ndarray
    total: float
    height: float           # sup(u − log∫ke^u)
    far_level: float        # sup of u − log∫ke^u outside ∪B_{0.2}(q_j)

    def rows(self):
        return [{"peak": j, "x [1]": float(q[0]), "y [1]": float(q[1]),
                 "radius [1]": self.radius, "mass [1]": float(mass)}
                for j, (q, mass) in enumerate(zip(self.peaks, self.masses))]


def find_peaks(grid, rho, radius):
    """Local maxima of a node density above 10× its median, strongest first, ≥ radius apart."""
    local = ndimage.maximum_filter(rho, size=PEAK_WINDOW, mode="wrap") == rho
    local &= rho > PEAK_FACTOR * float(np.median(rho))
    idx = np.argwhere(local)
    idx = idx[np.argsort(-rho[tuple(idx.T)])]
    s = grid.surface
    peaks = []
    for i, j in idx:
        q = grid.points[i, j]
        if all(s.distance(q, p) >= radius for p in peaks):
            peaks.append(q)
    return np.array(peaks).reshape(-1, 2)


def ball_masses(grid, rho, peaks, radius):
    s = grid.surface
    return np.array([integrate(grid, np.where(s.distance(grid.points, q) < radius, rho, 0.0))
                     for q in peaks])


def concentration_report(result, radius=REPORT_RADIUS, far_radius=FAR_RADIUS):
    """Peaks of ke^u above 10× its median and the masses λ∫_{B_r(q_j)}ke^u/∫ke^u."""
    grid = result.grid
    s = grid.surface
    rho = result.density.values
    peaks = find_peaks(grid, rho, radius)
    masses = ball_masses(grid, rho, peaks, radius)
    far = np.ones(grid.shape, dtype=bool)
    for q in peaks:
        far &= s.distance(grid.points, q) >= far_radius
    level = result.u.values - result.log_mass
    far_level = float(np.max(level[far])) if np.any(far) else -math.inf
    return ConcentrationReport(result.lam, float(radius), peaks, masses,
                               integrate(grid, rho), float(np.max(level)), far_level)


@dataclass(eq=False)
class BubbleFit:
    delta: float
    center: np.ndarray
    offset: float
    rms: float
    nodes: int


def fit_bubble(result, q):
    """Bubble fit of the normalized density λke^u/∫ke^u near the peak q."""
    fit = fit_density(result.grid, result.density.values, q)
    logger.debug("bubble fit at λ=%.8g: δ=%.4g ξ=%s rms=%.2e", result.lam, fit.delta,
                 np.round(fit.center, 6), fit.rms)
    return fit


def fit_density(grid, rho, q):
    """Least-squares fit of log ρ ≈ log 8δ² − 2 log(δ² + |x − ξ|²) + c near the peak q."""
    s = grid.surface
    y = s.displacement(grid.points, q)
    r = np.linalg.norm(y, axis=-1)
    peak = float(np.max(rho[r < 2 * s.shortest_period / grid.n + 1e-15], initial=0.0))
    if not peak > 0:
        raise DomainError("no positive density at the peak")
    d0 = math.sqrt(8.0 / peak)
    h = s.shortest_period / grid.n
    mask = (r < max(FIT_RADIUS * d0, FIT_MIN_NODES * h)) & (rho > 0)
    if np.count_nonzero(mask) < 8:
        raise DomainError(f"only {np.count_nonzero(mask)} nodes in the fit disk")
    ys, target = y[mask], np.log(rho[mask])

    def model(p):
        d2 = math.exp(2 * p[0])
        dist2 = np.sum((ys - p[1:3]) ** 2, axis=-1)
        return math.log(8 * d2) - 2 * np.log(d2 + dist2) + p[3] - target

    sol = least_squares(model, [math.log(d0), 0.0, 0.0, 0.0], method="lm")
    center = s.normalize(np.asarray(q, dtype=float) + sol.x[1:3])
    return BubbleFit(math.exp(sol.x[0]), center, float(sol.x[3]),
                     float(np.sqrt(np.mean(sol.fun**2))), int(np.count_nonzero(mask)))


def branch_table(results):
    """One row per solution: λ, residuals, leading peak, its mass and the fitted scale."""
    rows = []
    for res in results:
        rep = res.report or concentration_report(res)
        eps = distance_to_critical(res.lam)
        row = {"lambda [1]": res.lam, "residual [1]": res.residual,
               "raw_residual [1]": res.raw_residual, "iterations": res.iterations,
               "peaks": len(rep.peaks), "total_mass [1]": rep.total, "height [1]": rep.height,
               "far_level [1]": rep.far_level}
        if len(rep.peaks):
            row.update({"peak_x [1]": float(rep.peaks[0][0]), "peak_y [1]": float(rep.peaks[0][1]),
                        "mass [1]": float(rep.masses[0])})
        if res.fit is not None:
            row.update({"delta_fit [1]": res.fit.delta, "mu_fit [1]": res.fit.delta / math.sqrt(eps),
                        "fit_rms [1]": res.fit.rms})
        rows.append(row)
    return pd.DataFrame(rows)
