# backend/reports.py
"""Output emission: CSV tables, summary.yaml verdicts and binary field snapshots."""

import math
import os
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np
import pandas as pd
import yaml

from backend.errors import DomainError, UnsupportedSurfaceError
from backend.surface import Field, Surface, make_grid

SNAPSHOT_MAGIC = b"MFLD"
SUMMARY_FILE = "summary.yaml"
GENERATED_PREFIX = "# generated "


def utc_stamp():
    return datetime.now(timezone.utc).strftime('%Y-%m-%dT%H:%M:%SZ')


def run_dir(output_dir, command):
    """<output_dir>/<command>, created on demand."""
    path = os.path.join(output_dir, command)
    os.makedirs(path, exist_ok=True)
    return path


# ── CSV tables ────────────────────────────────────────────────────────────

def sanitize_table(df: pd.DataFrame) -> pd.DataFrame:
    """Object columns that hold only numbers and None become float columns (None → NaN)."""
    df_safe = df.copy()
    for col in df_safe.select_dtypes(include='object').columns:
        converted = pd.to_numeric(df_safe[col], errors='coerce')
        if converted.notna().sum() == df_safe[col].notna().sum():
            df_safe[col] = converted.astype(float)
    return df_safe


def write_table(df, path):
    """One `# generated <UTC>` line, then the header row and the data."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"{GENERATED_PREFIX}{utc_stamp()}\n")
        sanitize_table(df).to_csv(f, index=False, float_format="%.17g")
    return path


def read_table(path):
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
        if not first.startswith(GENERATED_PREFIX):
            f.seek(0)
        return pd.read_csv(f, float_precision="round_trip")


# ── summaries ─────────────────────────────────────────────────────────────

def _scalar(x):
    if x is None or isinstance(x, (bool, str)):
        return x
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    v = float(x)
    return v if math.isfinite(v) else str(v)


@dataclass
class Criterion:
    """One pass/fail check with the measured value and the threshold it was held to."""

    name: str
    passed: bool
    value: object = None
    threshold: object = None
    detail: str = ""

    def row(self):
        out = {"name": self.name, "passed": bool(self.passed), "value": _scalar(self.value),
               "threshold": _scalar(self.threshold)}
        if self.detail:
            out["detail"] = self.detail
        return out

    def line(self):
        mark = "✅" if self.passed else "❌"
        value = self.value if not isinstance(self.value, float) else f"{self.value:.4g}"
        return f"  {mark} {self.name}: {value} (threshold {self.threshold})"


def verdict(criteria):
    return "pass" if criteria and all(c.passed for c in criteria) else "fail"


def write_summary(directory, command, criteria, extra=None):
    """summary.yaml with the command, a `criteria` list and the overall verdict."""
    data = {"command": command, "generated": utc_stamp(),
            "criteria": [c.row() for c in criteria], "verdict": verdict(criteria)}
    if extra:
        data["details"] = {k: _scalar(v) for k, v in extra.items()}
    path = os.path.join(directory, SUMMARY_FILE)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(data, f, default_flow_style=False, allow_unicode=True, sort_keys=False)
    return path


def read_summary(path):
    """Load summary.yaml → dict; a missing file reads as a failing run with no criteria."""
    data = {}
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    data.setdefault("criteria", [])
    data.setdefault("verdict", "fail")
    return data


def criteria_table(criteria):
    return pd.DataFrame([c.row() for c in criteria],
                        columns=["name", "passed", "value", "threshold"])


# ── field snapshots ───────────────────────────────────────────────────────
# little-endian: b"MFLD", uint32 n, 2×2 float64 periods (row-major), n×n float64 values

def write_field_snapshot(path, field):
    grid = field.grid
    if not grid.surface.is_torus:
        raise UnsupportedSurfaceError("field snapshots store torus fields only")
    n = grid.n
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write(np.array([n], dtype="<u4").tobytes())
        f.write(np.asarray(grid.surface.basis, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
    return path


def read_field_snapshot(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != SNAPSHOT_MAGIC:
        raise DomainError(f"{path}: not a field snapshot (magic {raw[:4]!r})")
    n = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    expected = 8 + 32 + 8 * n * n
    if len(raw) != expected:
        raise DomainError(f"{path}: {len(raw)} bytes, expected {expected} for n={n}")
    periods = np.frombuffer(raw, dtype="<f8", count=4, offset=8).reshape(2, 2)
    values = np.frombuffer(raw, dtype="<f8", count=n * n, offset=40).reshape(n, n)
    grid = make_grid(Surface.flat_torus(periods), n)
    return Field(grid, values.copy())
