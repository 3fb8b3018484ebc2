#!/usr/bin/env python3
"""mflab — command line for the singular mean-field laboratory.

Every subcommand loads a RunConfig (preset → --config file → --set overrides),
writes its tables to <output_dir>/<command>/ together with config.yaml and
summary.yaml, and prints one ✅/❌ line per criterion.

Exit codes: 0 all criteria pass, 1 a criterion failed, 2 configuration error,
3 solver non-convergence.
"""

import argparse
import logging
import math
import os
import sys

import numpy as np
import pandas as pd

from backend.acceptance import CHECKS, SPHERE_HARMONICS, Context, run_acceptance, torus_wave
from backend.ansatz import BubbleParams, StarNorm, projection_errors, residual_R, \
    solve_projected_correction, star_norm
from backend.chern_simons import (
    condensate_sweep, condensate_table, regress_cs_coefficients, scaling_slope,
    verify_cs_expansion,
)
from backend.config import load_run_config, write_run_config
from backend.energy import (
    COEFF_ZERO, PAIR_TOL, REFINE_TOL, regress_coefficients, second_derivative_limit,
    solve_critical_pair, verify_expansion,
)
from backend.errors import BranchEndError, ConfigError, LabError, exit_code_for
from backend.greens import green_integral, weak_identity_defect
from backend.landscape import (
    existence_side, find_critical_points, flat_torus_identity, grad_phi_m, local_degree,
    minimum_branch_window, phi_1_map, sphere_minmax_condition,
)
from backend.mfsolver import (
    ansatz_initial, branch_table, continue_in_lambda, gradient_descent, solve,
)
from backend.orders import fit_order
from backend.reports import (
    Criterion, criteria_table, run_dir, verdict, write_field_snapshot, write_summary, write_table,
)
from backend.surface import Field

logger = logging.getLogger("mflab")

CRITICAL_GRAD = 1e-6        # |∇φ_m| below this: the seed counts as a critical point


def _criterion_at_most(name, value, threshold):
    return Criterion(name, bool(value <= threshold), float(value), f"≤ {threshold:g}")


def _criterion_at_least(name, value, threshold):
    return Criterion(name, bool(value >= threshold), float(value), f"≥ {threshold:g}")


def _seed_is_critical(cfg, seed):
    return float(np.linalg.norm(grad_phi_m(cfg.data, seed))) < CRITICAL_GRAD


def _start_field(cfg, args, lam, grid):
    """W + φ at the seed with δ from the critical pair, or zero without seeds."""
    if not cfg.seeds:
        return Field(grid, np.zeros(grid.shape))
    pair = solve_critical_pair(cfg.data, lam, cfg.seed_config(args.seed_index), grid=grid,
                               full=False)
    print(f"  seed: δ*={pair.delta:.6g} μ*={pair.mu:.4g}")
    return ansatz_initial(cfg.data, pair.config, pair.delta, lam, grid)


# ── subcommands ───────────────────────────────────────────────────────────

def cmd_green(cfg, args, out):
    s, ge = cfg.surface, cfg.data.green
    rng = np.random.default_rng(cfg.rng_seed)
    checks = ("symmetry", "robin", "mean", "weak") if args.check == "all" else (args.check,)
    criteria = []
    if "symmetry" in checks:
        x, y = s.random_points(rng, 100), s.random_points(rng, 100)
        keep = s.distance(x, y) > 1e-3
        sym = max(abs(float(ge.green(a, b)) - float(ge.green(b, a)))
                  for a, b in zip(x[keep], y[keep]))
        criteria.append(_criterion_at_most("green_symmetry", sym, 1e-10))
    if "robin" in checks:
        pts = s.random_points(rng, 20)
        vals = np.array([float(ge.regular_part(p, p)) for p in pts])
        table = pd.DataFrame(pts, columns=[f"xi_{c} [1]" for c in range(pts.shape[1])])
        table["robin [1]"] = vals
        write_table(table, os.path.join(out, "robin.csv"))
        criteria.append(_criterion_at_most("robin_spread", float(vals.max() - vals.min()), 1e-8))
    grid = cfg.make_grid()
    xi = s.random_points(rng, 1)[0]
    if "mean" in checks:
        criteria.append(_criterion_at_most("green_zero_mean", abs(green_integral(ge, grid, xi)),
                                           1e-8))
    if "weak" in checks:
        if s.is_torus:
            tests = [torus_wave(s, k, 0.3) for k in ([1, 0], [0, 1], [1, 1], [2, -1])]
            tol = 1e-8
        else:
            tests, tol = SPHERE_HARMONICS, 1e-6
        worst = max(weak_identity_defect(ge, grid, xi, psi, lap) for psi, lap in tests)
        criteria.append(_criterion_at_most("green_weak_identity", worst, tol))
    return criteria


def cmd_landscape(cfg, args, out):
    data = cfg.data
    pts, vals = phi_1_map(data, args.n)
    flat = pts.reshape(-1, pts.shape[-1])
    table = pd.DataFrame(flat, columns=[f"x_{c} [1]" for c in range(flat.shape[1])])
    table["phi_1 [1]"] = vals.ravel()
    write_table(table, os.path.join(out, "landscape.csv"))
    finite = np.isfinite(vals)
    criteria = [Criterion("phi_1_finite_off_sources", bool(np.sum(~finite) <= len(data.sources)),
                          int(np.sum(~finite)), f"≤ {len(data.sources)}")]
    if not data.sources:
        lo, hi = minimum_branch_window(data)
        print(f"  minimum-set families: 1 ≤ m < {lo:.4g} or m > {hi:.4g}")
    if not data.surface.is_torus:
        cond = sphere_minmax_condition(data, cfg.m)
        print(f"  min-max condition for m={cfg.m}: {cond}")
    return criteria


def cmd_critpoints(cfg, args, out):
    data = cfg.data
    found = find_critical_points(data, cfg.m, budget=args.budget, seed=cfg.rng_seed,
                                 grid=cfg.make_grid())
    rows = []
    for config, rep in found:
        row = rep.row()
        row["side"] = existence_side(rep.A, rep.B, COEFF_ZERO)
        row["degree"] = local_degree(data, config)
        rows.append(row)
        print(f"  {rep.classification:>8}  φ={rep.phi:+.8f}  A={rep.A:+.3e}  B={rep.B:+.6g}  "
              f"ξ={np.round(config.points, 6).tolist()}")
    write_table(pd.DataFrame(rows), os.path.join(out, "critpoints.csv"))
    criteria = [Criterion("critical_points_found", len(found) > 0, len(found), "≥ 1")]
    if found:
        worst = max(float(np.linalg.norm(rep.grad)) for _, rep in found)
        criteria.append(_criterion_at_most("critical_gradients", worst, 1e-8))
    if data.surface.is_torus and math.isclose(data.N, 2 * cfg.m) and found:
        pairs = [flat_torus_identity(data, c) for c, _ in found]
        rel = max(abs(a - b) / (1 + abs(a)) for a, b in pairs)
        criteria.append(_criterion_at_most("A_identity", rel, 1e-8))
    return criteria


def cmd_ansatz_check(cfg, args, out):
    data, seed, grid = cfg.data, cfg.seed_config(args.seed_index), cfg.make_grid()
    rule = cfg.lambda_rule
    rows = []
    for d in cfg.delta_sweep:
        p = BubbleParams(data, seed, d, cfg.r0, cfg.profile, grid)
        lam = rule(d, seed.m)
        err = projection_errors(p)
        corr = solve_projected_correction(p, lam, tol=cfg.tol)
        rows.append({"delta [1]": d, "lambda [1]": lam, "far [1]": err["far"],
                     "full [1]": err["full"], "alpha [1]": err["alpha"],
                     "R_star [1]": star_norm(StarNorm(p, cfg.sigma), residual_R(p, lam)),
                     "phi_sup [1]": corr.sup, "orthogonality [1]": float(np.max(corr.orthogonality)),
                     "iterations": corr.iterations})
    df = pd.DataFrame(rows)
    write_table(df, os.path.join(out, "ansatz.csv"))
    d = df["delta [1]"]
    r_order = 2 - cfg.sigma - 0.1 if _seed_is_critical(cfg, seed) else 0.9
    return [_criterion_at_least("expansion_full_order", fit_order(d, df["full [1]"]), 3.5),
            _criterion_at_least("residual_star_order", fit_order(d, df["R_star [1]"]), r_order),
            _criterion_at_least("correction_order", fit_order(d, df["phi_sup [1]"]),
                                2 - cfg.sigma - 0.2),
            _criterion_at_most("correction_orthogonality", float(df["orthogonality [1]"].max()),
                               1e-9)]


def cmd_energy_expand(cfg, args, out):
    data, seed = cfg.data, cfg.seed_config(args.seed_index)
    critical = _seed_is_critical(cfg, seed)
    report = verify_expansion(data, seed, cfg.delta_sweep, cfg.lambda_rule, grid=cfg.make_grid(),
                              r0=cfg.r0, profile=cfg.profile, gradient=not critical)
    write_table(report.table(), os.path.join(out, "energy_expand.csv"))
    A_fit, B_fit = regress_coefficients(report)
    limit, predicted = second_derivative_limit(report)
    print(f"  A={report.meta['A']:.6g} (fit {A_fit:.6g})  B={report.meta['B']:.6g} (fit {B_fit:.6g})")
    print(f"  ∂_δδ limit {limit:.6g} vs 3A − 2B = {predicted:.6g}")
    criteria = [_criterion_at_least("energy_remainder_order", report.order("J"), 2.0)]
    if abs(report.meta["B"]) > COEFF_ZERO:
        criteria.append(_criterion_at_most("energy_B_fit", abs(B_fit - report.meta["B"])
                                           / abs(report.meta["B"]), 0.02))
    if not critical:
        criteria.append(_criterion_at_least("grad_xi_order", report.order("grad_xi"), 1.8))
    return criteria


def cmd_critical_pair(cfg, args, out):
    lam = cfg.require_lambda()
    grid = cfg.make_grid()
    seed = cfg.seed_config(args.seed_index)
    pair = solve_critical_pair(cfg.data, lam, seed, grid=grid, full=not args.model_only,
                               bubble_grid=grid, r0=cfg.r0, profile=cfg.profile)
    write_table(pd.DataFrame([pair.row()]), os.path.join(out, "critical_pair.csv"))
    print(f"  δ*={pair.delta:.8g} μ*={pair.mu:.6g} in [{pair.interval[0]:.4g}, {pair.interval[1]:.4g}]")
    lo, hi = pair.interval
    limit = REFINE_TOL if pair.refined else PAIR_TOL
    return [_criterion_at_most("pair_grad_xi", pair.grad_xi, limit),
            _criterion_at_most("pair_d_delta", pair.d_delta, limit),
            Criterion("pair_mu_in_interval", bool(lo <= pair.mu <= hi), pair.mu,
                      f"[{lo:.4g}, {hi:.4g}]")]


def _solution_criteria(cfg, results):
    worst = max(r.residual for r in results)
    return [_criterion_at_most("solver_residual", worst, cfg.tol)]


def cmd_solve(cfg, args, out):
    lam = cfg.require_lambda()
    grid = cfg.make_grid()
    start = _start_field(cfg, args, lam, grid)
    if args.descent:
        result = gradient_descent(lam, cfg.data, start, cfg.tol)
    else:
        result = solve(lam, cfg.data, start, cfg.tol, cfg.max_iter)
    write_table(branch_table([result]), os.path.join(out, "solve.csv"))
    write_field_snapshot(os.path.join(out, "u.mfld"), result.u)
    print(f"  λ={lam:.10g}: {result.iterations} iterations, ‖Φ‖∞={result.residual:.2e}, "
          f"{len(result.report.peaks)} peak(s)")
    return _solution_criteria(cfg, [result])


def cmd_continue(cfg, args, out):
    path = list(cfg.lambda_path)
    if not path:
        raise ConfigError("lambda_path", "continuation needs at least one λ value")
    grid = cfg.make_grid()
    start = _start_field(cfg, args, path[0], grid)
    try:
        results = continue_in_lambda(cfg.data, start, path, tol=cfg.tol, max_iter=cfg.max_iter)
    except BranchEndError as e:
        if e.results:
            write_table(branch_table(e.results), os.path.join(out, "branch.csv"))
        raise
    write_table(branch_table(results), os.path.join(out, "branch.csv"))
    write_field_snapshot(os.path.join(out, "u_end.mfld"), results[-1].u)
    for r in results:
        mass = r.report.masses[0] if r.report is not None and len(r.report.masses) else float("nan")
        print(f"  λ={r.lam:.10g}  ‖Φ‖∞={r.residual:.2e}  peak mass {mass:.6g}")
    return _solution_criteria(cfg, results)


def cmd_cs_expand(cfg, args, out):
    seed = cfg.seed_config(args.seed_index)
    report = verify_cs_expansion(cfg.data, seed, cfg.delta_sweep, cfg.eps_rule,
                                 grid=cfg.make_grid(), r0=cfg.r0, profile=cfg.profile)
    write_table(report.table(), os.path.join(out, "cs_expand.csv"))
    A_fit, B_fit, Bt_fit = regress_cs_coefficients([report])
    print(f"  B̃={report.meta['Btilde']:.6g} (fit {Bt_fit:.6g})  B={report.meta['B']:.6g} (fit {B_fit:.6g})")
    if report.dropped:
        print(f"  dropped inadmissible δ: {report.dropped}")
    return [_criterion_at_least("cs_C_ratio_order", report.order("C_ratio"), 1.8),
            _criterion_at_least("cs_remainder_order", report.order("I"), 2.0)]


def cmd_cs_build(cfg, args, out):
    if not cfg.eps_list:
        raise ConfigError("eps_list", "cs-build needs at least one ε")
    grid = cfg.make_grid()
    seed = cfg.seed_config(args.seed_index)
    conds = condensate_sweep(cfg.data, cfg.eps_list, seed, grid=grid, tol=cfg.tol,
                             max_iter=cfg.max_iter)
    write_table(condensate_table(conds), os.path.join(out, "cs_build.csv"))
    last = min(conds, key=lambda c: c.eps)
    write_field_snapshot(os.path.join(out, "u_condensate.mfld"), last.state.u)
    criteria = [_criterion_at_most("cs_identity_residual",
                                   max(c.state.identity_residual for c in conds), 1e-10),
                _criterion_at_most("cs_residual", max(c.residual for c in conds), cfg.tol)]
    if len(conds) >= 2:
        criteria.append(_criterion_at_most("cs_delta_slope", abs(scaling_slope(conds) - 0.5), 0.05))
    return criteria


def cmd_acceptance(cfg, args, out):
    numbers = sorted({int(x) for x in args.only.split(",")}) if args.only else None
    if numbers and not set(numbers) <= set(CHECKS):
        raise ConfigError("--only", f"unknown check numbers {sorted(set(numbers) - set(CHECKS))}")
    ctx = Context(n=cfg.grid_n, output_dir=cfg.output_dir, seed=cfg.rng_seed)
    criteria = run_acceptance(numbers, ctx)
    write_table(criteria_table(criteria), os.path.join(out, "verdict.csv"))
    return criteria


COMMANDS = {
    "green": cmd_green,
    "landscape": cmd_landscape,
    "critpoints": cmd_critpoints,
    "ansatz-check": cmd_ansatz_check,
    "energy-expand": cmd_energy_expand,
    "critical-pair": cmd_critical_pair,
    "solve": cmd_solve,
    "continue": cmd_continue,
    "cs-expand": cmd_cs_expand,
    "cs-build": cmd_cs_build,
    "acceptance": cmd_acceptance,
}


# ── argument parsing ──────────────────────────────────────────────────────

def build_parser():
    ap = argparse.ArgumentParser(prog="mflab", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run-config YAML file")
    common.add_argument("--preset", help="named preset from presets.yaml")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key path, e.g. grid.n=128 (repeatable)")
    common.add_argument("--output-dir", help="overrides output_dir")
    common.add_argument("--seed-index", type=int, default=0, metavar="I",
                        help="which entry of seeds to use (default 0)")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("green", parents=[common], help="Green-function checks")
    p.add_argument("--surface", choices=["torus", "sphere"])
    p.add_argument("--check", choices=["symmetry", "robin", "mean", "weak", "all"], default="all")
    p = sub.add_parser("landscape", parents=[common], help="φ_1 map and existence diagnostics")
    p.add_argument("--n", type=int, default=128, help="samples per direction")
    p = sub.add_parser("critpoints", parents=[common], help="critical points of φ_m with A, B, B̃")
    p.add_argument("--budget", type=int, default=64, help="number of multistart points")
    sub.add_parser("ansatz-check", parents=[common], help="bubble expansion, R and φ along δ")
    sub.add_parser("energy-expand", parents=[common], help="J_λ(W) against its δ-expansion")
    p = sub.add_parser("critical-pair", parents=[common], help="(δ, ξ) zero of the reduced energy")
    p.add_argument("--lam", type=float)
    p.add_argument("--model-only", action="store_true",
                   help="stop at the critical pair of the model energy")
    p = sub.add_parser("solve", parents=[common], help="Newton solve at one λ")
    p.add_argument("--lam", type=float)
    p.add_argument("--descent", action="store_true", help="gradient descent instead of Newton")
    sub.add_parser("continue", parents=[common], help="continuation along lambda_path")
    sub.add_parser("cs-expand", parents=[common], help="Chern–Simons energy expansion")
    sub.add_parser("cs-build", parents=[common], help="Chern–Simons condensates over eps_list")
    p = sub.add_parser("acceptance", parents=[common], help="run the acceptance suite")
    p.add_argument("--only", help="comma-separated check numbers (1–13)")
    return ap


def _overrides(args):
    out = list(args.set)
    if args.output_dir:
        out.append(f"output_dir={args.output_dir}")
    if getattr(args, "surface", None):
        out.append(f"surface.kind={args.surface}")
    if getattr(args, "lam", None) is not None:
        out.append(f"lam={args.lam!r}")
    return out


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    print(f"=== {args.cmd} ===")
    try:
        cfg = load_run_config(args.config, args.preset, _overrides(args))
        out = run_dir(cfg.output_dir, args.cmd)
        write_run_config(os.path.join(out, "config.yaml"), cfg)
        criteria = COMMANDS[args.cmd](cfg, args, out)
    except LabError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return exit_code_for(e)

    for c in criteria:
        print(c.line())
    summary = write_summary(out, args.cmd, criteria)
    result = verdict(criteria)
    print(f"\n=== {result.upper()}: summary written to {summary} ===")
    return 0 if result == "pass" else 1


if __name__ == "__main__":
    sys.exit(main())
