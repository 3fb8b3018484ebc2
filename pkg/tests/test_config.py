import os
import tempfile

import pytest
import yaml

from backend.config import (
    DEFAULTS, dump_run_config, load_run_config, merge, parse_override, parse_run_config,
    read_presets, read_run_config, write_run_config,
)
from backend.errors import ConfigError

PRESETS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "presets.yaml")


def _write_yaml(data):
    with tempfile.NamedTemporaryFile(mode='w', suffix='.yaml', delete=False) as f:
        yaml.dump(data, f)
        return f.name


# ── readers ───────────────────────────────────────────────────────────────

def test_read_run_config_missing_file():
    result = read_run_config("/nonexistent/path.yaml")
    assert set(result) == set(DEFAULTS)
    assert result["grid"]["n"] == 256


def test_read_run_config_keeps_given_keys():
    path = _write_yaml({"m": 2, "lam": 50.0})
    try:
        result = read_run_config(path)
        assert result["m"] == 2
        assert result["lam"] == 50.0
        assert result["output_dir"] == "runs"   # default key added
    finally:
        os.unlink(path)


def test_malformed_yaml_is_config_error():
    with tempfile.NamedTemporaryFile(mode='w', suffix='.yaml', delete=False) as f:
        f.write("grid: {n: [1, 2\n")
        path = f.name
    try:
        with pytest.raises(ConfigError):
            read_run_config(path)
    finally:
        os.unlink(path)


def test_top_level_list_is_rejected():
    path = _write_yaml([1, 2, 3])
    try:
        with pytest.raises(ConfigError):
            read_run_config(path)
    finally:
        os.unlink(path)


def test_shipped_presets_all_parse():
    presets = read_presets(PRESETS)
    assert {"unit-torus", "rect-torus-n2", "sphere-two-sources"} <= set(presets)
    for name in presets:
        cfg = load_run_config(preset=name, presets_path=PRESETS)
        assert cfg.m >= 1


# ── merging and overrides ─────────────────────────────────────────────────

def test_merge_is_recursive_and_replaces_lists():
    base = {"grid": {"n": 256, "n_lat": None}, "seeds": [[[0.5, 0.5]]]}
    out = merge(base, {"grid": {"n": 64}, "seeds": []})
    assert out == {"grid": {"n": 64, "n_lat": None}, "seeds": []}
    assert base["grid"]["n"] == 256


def test_parse_override_reads_yaml_values():
    assert parse_override("grid.n=128") == {"grid": {"n": 128}}
    assert parse_override("lam=25.2") == {"lam": 25.2}
    assert parse_override("seeds=[[[0.5, 0.75]]]") == {"seeds": [[[0.5, 0.75]]]}


def test_parse_override_needs_equals():
    with pytest.raises(ConfigError):
        parse_override("grid.n")


def test_preset_then_file_then_override():
    path = _write_yaml({"grid": {"n": 64}, "lam": 25.3})
    try:
        cfg = load_run_config(path, "rect-torus-n2", ["lam=25.25"], presets_path=PRESETS)
        assert cfg.periods == ((1.0, 0.0), (0.0, 1.5))   # preset
        assert cfg.grid_n == 64                         # file
        assert cfg.lam == 25.25                         # override
    finally:
        os.unlink(path)


def test_unknown_preset():
    with pytest.raises(ConfigError) as exc:
        load_run_config(preset="no-such-preset", presets_path=PRESETS)
    assert exc.value.path == "preset"


def test_missing_config_file_is_strict():
    with pytest.raises(ConfigError):
        load_run_config("/nonexistent/run.yaml")


# ── validation ────────────────────────────────────────────────────────────

def test_defaults_parse():
    cfg = parse_run_config({})
    assert cfg.surface.is_torus
    assert cfg.m == 1
    assert cfg.h == {"kind": "constant", "c": 1.0}


@pytest.mark.parametrize("data, path", [
    ({"grdi": {"n": 64}}, "grdi"),
    ({"grid": {"nn": 64}}, "grid.nn"),
    ({"grid": {"n": 4}}, "grid.n"),
    ({"sigma": 1.5}, "sigma"),
    ({"m": 0}, "m"),
    ({"surface": {"kind": "cylinder"}}, "surface.kind"),
    ({"surface": {"periods": [[1.0, 0.0], [2.0, 0.0]]}}, "surface.periods"),
    ({"cutoff": {"profile": "cubic"}}, "cutoff.profile"),
    ({"singular": {"h": {"kind": "cosine", "c": 1.0, "amplitude": 2.0}}}, "singular.h"),
    ({"seeds": [[[0.5, 0.5], [0.2, 0.2]]]}, "seeds[0]"),
])
def test_invalid_values_name_their_path(data, path):
    with pytest.raises(ConfigError) as exc:
        parse_run_config(data)
    assert exc.value.path == path


def test_seed_on_a_source_is_rejected():
    data = {"singular": {"sources": [{"point": [0.0, 0.0], "n": 2.0}]}, "seeds": [[[0.0, 0.0]]]}
    with pytest.raises(ConfigError) as exc:
        parse_run_config(data)
    assert exc.value.path == "seeds[0]"


def test_r0_above_injectivity_bound():
    with pytest.raises(ConfigError) as exc:
        parse_run_config({"cutoff": {"r0": 0.4}})
    assert exc.value.path == "cutoff.r0"


def test_missing_seed_and_lambda():
    cfg = parse_run_config({})
    with pytest.raises(ConfigError, match="missing seed"):
        cfg.seed_config()
    with pytest.raises(ConfigError) as exc:
        cfg.require_lambda()
    assert exc.value.path == "lam"


def test_sphere_grid_dimensions():
    cfg = parse_run_config({"surface": {"kind": "sphere"}, "grid": {"n": 64, "n_lat": 32}})
    grid = cfg.make_grid()
    assert grid.shape == (32, 64)


# ── round trip ────────────────────────────────────────────────────────────

def test_dump_then_parse_is_identity():
    cfg = load_run_config(preset="rect-torus-n2", presets_path=PRESETS)
    assert parse_run_config(dump_run_config(cfg)) == cfg


def test_written_config_reloads():
    cfg = load_run_config(preset="sphere-affine", presets_path=PRESETS)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "config.yaml")
        write_run_config(path, cfg)
        assert load_run_config(path) == cfg
