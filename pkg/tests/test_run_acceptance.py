import sys, os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import tempfile

from backend.reports import Criterion, read_summary
from scripts.run_acceptance import compare


def test_compare_reports_flips_only():
    previous = {"criteria": [{"name": "01_green_torus", "passed": True},
                             {"name": "05_rect_landscape", "passed": False},
                             {"name": "08_energy", "passed": True}]}
    now = [Criterion("01_green_torus", False), Criterion("05_rect_landscape", True),
           Criterion("08_energy", True), Criterion("13_cs", False)]
    regressed, fixed = compare(previous, now)
    assert regressed == ["01_green_torus"]
    assert fixed == ["05_rect_landscape"]


def test_compare_without_previous_run():
    assert compare({}, [Criterion("01_green_torus", False)]) == ([], [])


def test_main_writes_summary(monkeypatch):
    import scripts.run_acceptance as ra
    monkeypatch.setattr(ra, "run_acceptance",
                        lambda numbers, ctx: [Criterion(f"{k:02d}_stub", True) for k in numbers])
    with tempfile.TemporaryDirectory() as tmp:
        assert ra.main(["--only", "2,1", "--output-dir", tmp]) == 0
        summary = read_summary(os.path.join(tmp, "acceptance", "summary.yaml"))
    assert [c["name"] for c in summary["criteria"]] == ["01_stub", "02_stub"]
    assert summary["verdict"] == "pass"


def test_first_run_reports_no_previous_state(monkeypatch, capsys):
    import scripts.run_acceptance as ra
    monkeypatch.setattr(ra, "run_acceptance",
                        lambda numbers, ctx: [Criterion("01_stub", True)])
    with tempfile.TemporaryDirectory() as tmp:
        ra.main(["--only", "1", "--output-dir", tmp])
        assert "No changes since last run" not in capsys.readouterr().out
        ra.main(["--only", "1", "--output-dir", tmp])
        assert "No changes since last run" in capsys.readouterr().out
