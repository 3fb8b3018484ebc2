# backend/config.py
"""Run configuration: YAML readers/writers, presets and validation into RunConfig.

Documented key paths (every key optional, defaults below):

    surface.kind            torus | sphere
    surface.periods         two period vectors (torus)
    singular.h              {kind: constant|cosine|affine|zonal, c, amplitude, wave, phase,
                             direction, coefficients}
    singular.sources        list of {point, n}
    singular.method         theta | ewald (torus Green evaluator)
    m                       number of concentration points
    grid.n, grid.n_lat, grid.n_lon
    cutoff.r0, cutoff.profile
    sigma                   ∗-norm exponent in (0, 1)
    delta_sweep             δ values of expansion sweeps
    lambda_rule.sign, lambda_rule.c     λ(δ) = 8πm + sign·c·δ²|log δ|
    eps_rule.c              ε(δ) = c·δ²
    lam, lambda_path        single λ / continuation path
    eps_list                Chern–Simons ε values
    seeds                   list of configurations, each a list of m points
    output_dir, rng_seed
    solver.tol, solver.max_iter
"""

import copy
import math
import os
from dataclasses import dataclass, field
from functools import cached_property

import yaml

from backend.ansatz import DEFAULT_DELTA_MAX
from backend.chern_simons import EpsRule
from backend.energy import LambdaRule
from backend.errors import ConfigError, DomainError
from backend.greens import GREEN_METHODS
from backend.landscape import BasePotential, Configuration, check_admissible, singular_data
from backend.mfsolver import MAX_ITER, SOLVER_TOL
from backend.surface import CUTOFF_PROFILES, SPHERE, TORUS, Surface, make_grid

PRESETS_FILE = "presets.yaml"
MIN_GRID = 16

_H_KEYS = ("kind", "c", "amplitude", "wave", "phase", "direction", "coefficients")

DEFAULTS = {
    "surface": {"kind": TORUS, "periods": [[1.0, 0.0], [0.0, 1.0]]},
    "singular": {"h": {"kind": "constant", "c": 1.0}, "sources": [], "method": "theta"},
    "m": 1,
    "grid": {"n": 256, "n_lat": None, "n_lon": None},
    "cutoff": {"r0": None, "profile": "quintic"},
    "sigma": 0.5,
    "delta_sweep": [0.08, 0.057, 0.04, 0.028, 0.02],
    "lambda_rule": {"sign": 1, "c": 1.0},
    "eps_rule": {"c": 1.0},
    "lam": None,
    "lambda_path": [],
    "eps_list": [1e-3, 5e-4, 2.5e-4],
    "seeds": [],
    "output_dir": "runs",
    "rng_seed": 0,
    "solver": {"tol": SOLVER_TOL, "max_iter": MAX_ITER},
}


# ── file readers ──────────────────────────────────────────────────────────

def _read_yaml(path):
    if not os.path.exists(path):
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(path, f"not valid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(path, f"top level must be a mapping, got {type(data).__name__}")
    return data


def read_run_config(path):
    """Load a run-config YAML → dict with every documented top-level key."""
    data = _read_yaml(path)
    for key, value in DEFAULTS.items():
        data.setdefault(key, copy.deepcopy(value))
    return data


def read_presets(path=PRESETS_FILE):
    """Load presets.yaml → {name: partial config dict}."""
    data = _read_yaml(path)
    for name, preset in data.items():
        if not isinstance(preset, dict):
            raise ConfigError(f"{path}:{name}", "a preset must be a mapping")
    return data


def write_run_config(path, cfg):
    with open(path, "w", encoding="utf-8") as f:
        yaml.dump(dump_run_config(cfg), f, default_flow_style=False, allow_unicode=True,
                  sort_keys=False)


# ── merging and overrides ─────────────────────────────────────────────────

def merge(base, override):
    """Recursive dict merge; override wins, lists are replaced whole."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text):
    """'grid.n=128' → {'grid': {'n': 128}}; the value is read as YAML."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(text, "override must look like key.path=value")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(key, f"override value is not valid YAML: {e}") from e
    out = value
    for part in reversed(key.strip().split(".")):
        out = {part: out}
    return out


def load_run_config(path=None, preset=None, overrides=None, presets_path=PRESETS_FILE):
    """preset → file → overrides, then validated into a RunConfig."""
    data = {}
    if preset:
        presets = read_presets(presets_path)
        if preset not in presets:
            raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(presets)}")
        data = merge(data, presets[preset])
    if path:
        if not os.path.exists(path):
            raise ConfigError(path, "config file not found")
        data = merge(data, _read_yaml(path))
    for text in overrides or ():
        data = merge(data, parse_override(text))
    return parse_run_config(data)


# ── validation ────────────────────────────────────────────────────────────

def _check_keys(data, schema, prefix=""):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", f"expected a mapping, got {type(data).__name__}")
    for key in data:
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in schema:
            raise ConfigError(path, "unknown key")
        if isinstance(schema[key], dict) and key != "h" and data[key] is not None:
            _check_keys(data[key], schema[key], path)


def _real(value, path, lo=-math.inf, hi=math.inf, open_lo=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    v = float(value)
    below = v <= lo if open_lo else v < lo
    if not math.isfinite(v) or below or v > hi:
        left = "(" if open_lo else "["
        raise ConfigError(path, f"{v:g} outside {left}{lo:g}, {hi:g}]")
    return v


def _integer(value, path, lo=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(path, f"{value} is below {lo}")
    return int(value)


def _choice(value, path, choices):
    if value not in choices:
        raise ConfigError(path, f"{value!r} is not one of {tuple(choices)}")
    return value


def _reals(value, path, **kw):
    if not isinstance(value, (list, tuple)):
        raise ConfigError(path, f"expected a list, got {value!r}")
    return tuple(_real(v, f"{path}[{i}]", **kw) for i, v in enumerate(value))


def _point(value, path, dim):
    p = _reals(value, path)
    if len(p) != dim:
        raise ConfigError(path, f"expected {dim} coordinates, got {len(p)}")
    return p


def _h_spec(value, path):
    if not isinstance(value, dict):
        raise ConfigError(path, "expected a mapping")
    out = {}
    for key, v in value.items():
        if key not in _H_KEYS:
            raise ConfigError(f"{path}.{key}", "unknown key")
        if key == "kind":
            out[key] = str(v)
        elif key == "wave":
            if not isinstance(v, (list, tuple)) or len(v) != 2:
                raise ConfigError(f"{path}.wave", "expected two integers")
            out[key] = tuple(_integer(w, f"{path}.wave[{i}]") for i, w in enumerate(v))
        elif key in ("direction", "coefficients"):
            out[key] = _reals(v, f"{path}.{key}")
        else:
            out[key] = _real(v, f"{path}.{key}")
    return out


def parse_run_config(data):
    """Validate a config dict into a RunConfig; every failure is a ConfigError naming its path."""
    _check_keys(data, DEFAULTS)
    d = merge(DEFAULTS, data)

    kind = _choice(d["surface"]["kind"], "surface.kind", (TORUS, SPHERE))
    periods = None
    if kind == TORUS:
        rows = d["surface"]["periods"]
        if not isinstance(rows, (list, tuple)) or len(rows) != 2:
            raise ConfigError("surface.periods", "expected two period vectors")
        periods = tuple(_point(r, f"surface.periods[{i}]", 2) for i, r in enumerate(rows))
    dim = 2 if kind == TORUS else 3

    h = _h_spec(d["singular"]["h"], "singular.h")
    sources = d["singular"]["sources"] or []
    if not isinstance(sources, (list, tuple)):
        raise ConfigError("singular.sources", "expected a list of {point, n}")
    parsed_sources = []
    for i, src in enumerate(sources):
        path = f"singular.sources[{i}]"
        if not isinstance(src, dict) or set(src) - {"point", "n"} or "point" not in src:
            raise ConfigError(path, "expected a mapping with keys point and n")
        parsed_sources.append((_point(src["point"], f"{path}.point", dim),
                               _real(src.get("n", 1.0), f"{path}.n", lo=0.0, open_lo=True)))

    m = _integer(d["m"], "m", lo=1)
    grid = d["grid"]
    cutoff = d["cutoff"]
    lam = d["lam"]
    cfg = RunConfig(
        surface_kind=kind,
        periods=periods,
        h=h,
        sources=tuple(parsed_sources),
        green_method=_choice(d["singular"]["method"], "singular.method", GREEN_METHODS),
        m=m,
        grid_n=_integer(grid["n"], "grid.n", lo=MIN_GRID),
        grid_n_lat=None if grid["n_lat"] is None else _integer(grid["n_lat"], "grid.n_lat", lo=8),
        grid_n_lon=None if grid["n_lon"] is None else _integer(grid["n_lon"], "grid.n_lon", lo=MIN_GRID),
        r0=None if cutoff["r0"] is None else _real(cutoff["r0"], "cutoff.r0", lo=0.0, open_lo=True),
        profile=_choice(cutoff["profile"], "cutoff.profile", CUTOFF_PROFILES),
        sigma=_real(d["sigma"], "sigma", lo=0.0, hi=1.0, open_lo=True),
        delta_sweep=_reals(d["delta_sweep"], "delta_sweep", lo=0.0, hi=DEFAULT_DELTA_MAX,
                           open_lo=True),
        lambda_sign=_choice(d["lambda_rule"]["sign"], "lambda_rule.sign", (-1, 0, 1)),
        lambda_c=_real(d["lambda_rule"]["c"], "lambda_rule.c", lo=0.0),
        eps_c=_real(d["eps_rule"]["c"], "eps_rule.c", lo=0.0, open_lo=True),
        lam=None if lam is None else _real(lam, "lam", lo=0.0, open_lo=True),
        lambda_path=_reals(d["lambda_path"] or [], "lambda_path", lo=0.0, open_lo=True),
        eps_list=_reals(d["eps_list"] or [], "eps_list", lo=0.0, hi=1.0, open_lo=True),
        seeds=_seeds(d["seeds"] or [], m, dim),
        output_dir=str(d["output_dir"]),
        rng_seed=_integer(d["rng_seed"], "rng_seed", lo=0),
        tol=_real(d["solver"]["tol"], "solver.tol", lo=0.0, open_lo=True),
        max_iter=_integer(d["solver"]["max_iter"], "solver.max_iter", lo=1),
    )
    cfg.validate()
    return cfg


def _seeds(value, m, dim):
    if not isinstance(value, (list, tuple)):
        raise ConfigError("seeds", "expected a list of configurations")
    out = []
    for i, seed in enumerate(value):
        if not isinstance(seed, (list, tuple)) or len(seed) != m:
            raise ConfigError(f"seeds[{i}]", f"expected {m} point(s) (m = {m})")
        out.append(tuple(_point(p, f"seeds[{i}][{j}]", dim) for j, p in enumerate(seed)))
    return tuple(out)


def _plain(value):
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def dump_run_config(cfg):
    """RunConfig → plain dict in the documented schema; parse_run_config inverts it."""
    return _plain({
        "surface": {"kind": cfg.surface_kind, "periods": cfg.periods},
        "singular": {"h": dict(cfg.h),
                     "sources": [{"point": p, "n": n} for p, n in cfg.sources],
                     "method": cfg.green_method},
        "m": cfg.m,
        "grid": {"n": cfg.grid_n, "n_lat": cfg.grid_n_lat, "n_lon": cfg.grid_n_lon},
        "cutoff": {"r0": cfg.r0, "profile": cfg.profile},
        "sigma": cfg.sigma,
        "delta_sweep": cfg.delta_sweep,
        "lambda_rule": {"sign": cfg.lambda_sign, "c": cfg.lambda_c},
        "eps_rule": {"c": cfg.eps_c},
        "lam": cfg.lam,
        "lambda_path": cfg.lambda_path,
        "eps_list": cfg.eps_list,
        "seeds": cfg.seeds,
        "output_dir": cfg.output_dir,
        "rng_seed": cfg.rng_seed,
        "solver": {"tol": cfg.tol, "max_iter": cfg.max_iter},
    })


# ── RunConfig ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class RunConfig:
    surface_kind: str = TORUS
    periods: tuple = ((1.0, 0.0), (0.0, 1.0))
    h: dict = field(default_factory=lambda: {"kind": "constant", "c": 1.0})
    sources: tuple = ()
    green_method: str = "theta"
    m: int = 1
    grid_n: int = 256
    grid_n_lat: int = None
    grid_n_lon: int = None
    r0: float = None
    profile: str = "quintic"
    sigma: float = 0.5
    delta_sweep: tuple = (0.08, 0.057, 0.04, 0.028, 0.02)
    lambda_sign: int = 1
    lambda_c: float = 1.0
    eps_c: float = 1.0
    lam: float = None
    lambda_path: tuple = ()
    eps_list: tuple = (1e-3, 5e-4, 2.5e-4)
    seeds: tuple = ()
    output_dir: str = "runs"
    rng_seed: int = 0
    tol: float = SOLVER_TOL
    max_iter: int = MAX_ITER

    def validate(self):
        """Build every domain object once so module preconditions fail at load time."""
        try:
            surface = self.surface
        except DomainError as e:
            raise ConfigError("surface.periods", str(e)) from e
        try:
            self.base_potential.check_surface(surface)
        except (DomainError, TypeError, NotImplementedError) as e:
            raise ConfigError("singular.h", str(e)) from e
        try:
            self.data
        except (DomainError, NotImplementedError) as e:
            raise ConfigError("singular.sources", str(e)) from e
        if self.r0 is not None and self.r0 > surface.injectivity_bound:
            raise ConfigError("cutoff.r0", f"{self.r0:g} above the injectivity bound "
                                           f"{surface.injectivity_bound:.6g}")
        for i in range(len(self.seeds)):
            try:
                check_admissible(self.data, self.seed_config(i))
            except DomainError as e:
                raise ConfigError(f"seeds[{i}]", str(e)) from e

    @cached_property
    def surface(self):
        if self.surface_kind == TORUS:
            return Surface.flat_torus(self.periods)
        return Surface.round_sphere()

    @cached_property
    def base_potential(self):
        return BasePotential(**self.h)

    @cached_property
    def data(self):
        return singular_data(self.surface, self.base_potential, self.sources, self.green_method)

    def make_grid(self, n=None):
        if self.surface.is_torus:
            return make_grid(self.surface, n or self.grid_n)
        return make_grid(self.surface, n or self.grid_n_lon or self.grid_n, self.grid_n_lat)

    def seed_config(self, index=0):
        if not self.seeds:
            raise ConfigError("seeds", "missing seed: this pipeline needs at least one configuration")
        if index >= len(self.seeds):
            raise ConfigError("seeds", f"no seed number {index} ({len(self.seeds)} given)")
        return Configuration.on(self.surface, self.seeds[index])

    @property
    def lambda_rule(self):
        return LambdaRule(self.lambda_sign, self.lambda_c)

    @property
    def eps_rule(self):
        return EpsRule(self.eps_c)

    def require_lambda(self):
        if self.lam is None:
            raise ConfigError("lam", "this pipeline needs λ")
        return self.lam
