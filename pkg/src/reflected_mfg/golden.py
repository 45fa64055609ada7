"""Field-wise comparison of a run directory against a stored golden directory."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

SKIP_FILES = {"manifest.json"}
# Wall-clock measurements differ between otherwise identical runs.
SKIP_KEYS = {"runtime_s", "wall_time_s"}
BAND_SIGMAS = 3.0


@dataclass
class CompareReport:
    failures: list = field(default_factory=list)
    compared: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures

    def fail(self, where: str, message: str) -> None:
        self.failures.append(f"{where}: {message}")

    def summary(self) -> str:
        if self.passed:
            return f"PASS ({self.compared} values compared)"
        return "FAIL\n" + "\n".join("  " + f for f in self.failures)


def _close(a: float, b: float, rtol: float, atol: float) -> bool:
    if math.isnan(a) and math.isnan(b):
        return True
    return abs(a - b) <= atol + rtol * max(abs(a), abs(b))


def _compare_estimate(where, a: dict, b: dict, rtol, report):
    """Monte Carlo estimates carry a standard error: compare within a band."""
    report.compared += 1
    se = math.hypot(float(a.get("stderr") or 0.0), float(b.get("stderr") or 0.0))
    va, vb = float(a["value"]), float(b["value"])
    if se > 0:
        if abs(va - vb) > BAND_SIGMAS * se:
            report.fail(where, f"{va!r} vs {vb!r} outside {BAND_SIGMAS:g} sigma band ({se:.3g})")
    elif not _close(va, vb, rtol, 0.0):
        report.fail(where, f"{va!r} vs {vb!r} beyond rtol {rtol:g}")


def _compare_json(where, a, b, rtol, report):
    if isinstance(a, dict) and isinstance(b, dict):
        if {"value", "stderr"} <= set(a) and {"value", "stderr"} <= set(b):
            _compare_estimate(where, a, b, rtol, report)
            return
        for key in sorted(set(a) | set(b)):
            if key in SKIP_KEYS:
                continue
            if key not in a or key not in b:
                report.fail(f"{where}.{key}", "missing on one side")
            else:
                _compare_json(f"{where}.{key}", a[key], b[key], rtol, report)
    elif isinstance(a, list) and isinstance(b, list):
        if len(a) != len(b):
            report.fail(where, f"length {len(a)} vs {len(b)}")
            return
        for k, (x, y) in enumerate(zip(a, b)):
            _compare_json(f"{where}[{k}]", x, y, rtol, report)
    elif isinstance(a, (int, float)) and isinstance(b, (int, float)) and not isinstance(a, bool):
        report.compared += 1
        if not _close(float(a), float(b), rtol, 0.0):
            report.fail(where, f"{a!r} vs {b!r} beyond rtol {rtol:g}")
    else:
        report.compared += 1
        if a != b:
            report.fail(where, f"{a!r} vs {b!r}")


def _read_csv(path: Path) -> list:
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _as_float(s: str):
    try:
        return float(s)
    except ValueError:
        return None


def _compare_csv(name, pa: Path, pb: Path, rtol, report):
    ra, rb = _read_csv(pa), _read_csv(pb)
    if len(ra) != len(rb):
        report.fail(name, f"{len(ra)} rows vs {len(rb)}")
        return
    header = ra[0] if ra and all(_as_float(c) is None for c in ra[0]) else None
    banded = header is not None and "value" in header and "stderr" in header
    for r, (row_a, row_b) in enumerate(zip(ra, rb)):
        if len(row_a) != len(row_b):
            report.fail(f"{name}:{r}", "column count differs")
            continue
        if banded and r > 0:
            iv, ise = header.index("value"), header.index("stderr")
            _compare_estimate(f"{name}:{r}", {"value": row_a[iv], "stderr": row_a[ise]},
                              {"value": row_b[iv], "stderr": row_b[ise]}, rtol, report)
            others = [c for c in range(len(row_a)) if c not in (iv, ise)]
        else:
            others = range(len(row_a))
        for c in others:
            fa, fb = _as_float(row_a[c]), _as_float(row_b[c])
            col = header[c] if header else str(c)
            report.compared += 1
            if fa is None or fb is None:
                if row_a[c] != row_b[c]:
                    report.fail(f"{name}:{r}:{col}", f"{row_a[c]!r} vs {row_b[c]!r}")
            elif not _close(fa, fb, rtol, 0.0):
                report.fail(f"{name}:{r}:{col}", f"{fa!r} vs {fb!r} beyond rtol {rtol:g}")


def golden_compare(run_dir, golden_dir, rtol: float = 1e-9) -> CompareReport:
    """Compare every CSV and JSON file of ``golden_dir`` with its twin in ``run_dir``.

    Deterministic numbers must agree to ``rtol``; entries that carry a standard
    error (``value``/``stderr`` pairs) must agree within a 3-sigma band.
    """
    run, gold = Path(run_dir), Path(golden_dir)
    report = CompareReport()
    for pg in sorted(gold.rglob("*")):
        if not pg.is_file() or pg.name in SKIP_FILES or pg.suffix not in (".csv", ".json"):
            continue
        rel = pg.relative_to(gold)
        pr = run / rel
        if not pr.exists():
            report.fail(str(rel), "missing from run directory")
            continue
        if pg.suffix == ".json":
            _compare_json(str(rel), json.loads(pr.read_text()), json.loads(pg.read_text()), rtol, report)
        else:
            _compare_csv(str(rel), pr, pg, rtol, report)
    return report
