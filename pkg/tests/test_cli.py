import sys, os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import tempfile

import pytest

import main as cli
from backend.errors import BranchEndError, NonConvergenceError
from backend.reports import Criterion, read_summary, read_table

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture
def out_dir():
    with tempfile.TemporaryDirectory() as tmp:
        yield tmp


def run(out_dir, *argv):
    return cli.main([*argv, "--output-dir", out_dir, "--set", "grid.n=16"])


# ── argument parsing ──────────────────────────────────────────────────────

def test_every_command_is_registered():
    parser = cli.build_parser()
    for name in cli.COMMANDS:
        args = parser.parse_args([name])
        assert args.cmd == name


def test_overrides_collect_shortcuts():
    args = cli.build_parser().parse_args(["solve", "--lam", "25.2", "--set", "m=1",
                                          "--output-dir", "/tmp/x"])
    assert cli._overrides(args) == ["m=1", "output_dir=/tmp/x", "lam=25.2"]


def test_surface_shortcut():
    args = cli.build_parser().parse_args(["green", "--surface", "sphere"])
    assert "surface.kind=sphere" in cli._overrides(args)


# ── exit codes ────────────────────────────────────────────────────────────

def test_bad_config_exits_2(out_dir):
    assert cli.main(["green", "--output-dir", out_dir, "--set", "grid.n=4"]) == 2


def test_unknown_key_exits_2(out_dir):
    assert run(out_dir, "green", "--set", "grdi.n=64") == 2


def test_unknown_preset_exits_2(out_dir, monkeypatch):
    monkeypatch.chdir(ROOT)
    assert run(out_dir, "green", "--preset", "no-such-preset") == 2


def test_missing_lambda_exits_2(out_dir):
    assert run(out_dir, "solve") == 2


def test_missing_seed_exits_2(out_dir):
    assert run(out_dir, "ansatz-check") == 2


def test_seed_index_out_of_range_exits_2(out_dir, monkeypatch):
    monkeypatch.chdir(ROOT)
    assert run(out_dir, "ansatz-check", "--preset", "rect-torus-n2", "--seed-index", "5") == 2


def test_non_convergence_exits_3(out_dir, monkeypatch):
    def fail(*args, **kwargs):
        raise NonConvergenceError("stalled", iterations=60)

    monkeypatch.setattr(cli, "solve", fail)
    assert run(out_dir, "solve", "--lam", "10.0") == 3


def test_branch_end_exits_3(out_dir, monkeypatch):
    def fail(*args, **kwargs):
        raise BranchEndError("step underflow at λ=25.14")

    monkeypatch.setattr(cli, "continue_in_lambda", fail)
    assert run(out_dir, "continue", "--set", "lambda_path=[10.0, 12.0]") == 3


def test_empty_lambda_path_exits_2(out_dir):
    assert run(out_dir, "continue") == 2


# ── commands ──────────────────────────────────────────────────────────────

def test_green_symmetry_on_torus(out_dir):
    assert run(out_dir, "green", "--check", "symmetry") == 0
    summary = read_summary(os.path.join(out_dir, "green", "summary.yaml"))
    assert summary["verdict"] == "pass"
    assert [c["name"] for c in summary["criteria"]] == ["green_symmetry"]
    assert os.path.exists(os.path.join(out_dir, "green", "config.yaml"))


def test_green_robin_on_sphere_is_constant(out_dir):
    assert run(out_dir, "green", "--surface", "sphere", "--check", "robin") == 0
    table = read_table(os.path.join(out_dir, "green", "robin.csv"))
    assert len(table) == 20
    assert table["robin [1]"].max() - table["robin [1]"].min() < 1e-8


def test_subcritical_solve_from_zero(out_dir):
    """Constant k below 8π: u ≡ 0 is the solution."""
    assert run(out_dir, "solve", "--lam", "10.0") == 0
    table = read_table(os.path.join(out_dir, "solve", "solve.csv"))
    assert table["residual [1]"][0] <= 1e-10
    assert os.path.exists(os.path.join(out_dir, "solve", "u.mfld"))


def test_acceptance_writes_verdict(out_dir, monkeypatch):
    monkeypatch.setattr(cli, "run_acceptance",
                        lambda numbers, ctx: [Criterion("01_green_torus", True, 1e-12, 1e-10)])
    assert run(out_dir, "acceptance", "--only", "1") == 0
    verdict = read_table(os.path.join(out_dir, "acceptance", "verdict.csv"))
    assert list(verdict["name"]) == ["01_green_torus"]


def test_acceptance_failure_exits_1(out_dir, monkeypatch):
    monkeypatch.setattr(cli, "run_acceptance",
                        lambda numbers, ctx: [Criterion("05_rect_landscape", False, 2, "= 3")])
    assert run(out_dir, "acceptance") == 1
    summary = read_summary(os.path.join(out_dir, "acceptance", "summary.yaml"))
    assert summary["verdict"] == "fail"


def test_acceptance_unknown_check_exits_2(out_dir):
    assert run(out_dir, "acceptance", "--only", "1,99") == 2
