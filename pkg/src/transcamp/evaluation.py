"""Median pose errors and cumulative error curves."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Pose, rot_distance, trans_distance


class EvalError(ValueError):
    pass


def lower_median(values: Sequence[float]) -> float:
    s = sorted(values)
    if not s:
        raise EvalError("median of an empty list")
    return float(s[(len(s) - 1) // 2])


@dataclass
class EvalReport:
    median_rot_deg: float
    median_trans: float
    errors: list[tuple[float, float]]
    cdf_rot: list[float] = field(default_factory=list)
    cdf_trans: list[float] = field(default_factory=list)

    @classmethod
    def from_errors(cls, rot_deg: Sequence[float], trans: Sequence[float]) -> "EvalReport":
        rot_deg, trans = list(map(float, rot_deg)), list(map(float, trans))
        if len(rot_deg) != len(trans) or not rot_deg:
            raise EvalError("need equal, non-empty error lists")
        return cls(
            lower_median(rot_deg),
            lower_median(trans),
            list(zip(rot_deg, trans)),
            sorted(rot_deg),
            sorted(trans),
        )

    def summary(self) -> dict:
        return {"median_rot_deg": self.median_rot_deg, "median_trans": self.median_trans, "n_frames": len(self.errors)}


def align_to_first(pred: Sequence[Pose], gt: Sequence[Pose]) -> list[Pose]:
    """Re-anchor predictions so predicted pose 0 coincides with gt pose 0."""
    g = pred[0].inverse().compose(gt[0])
    return [p.compose(g) for p in pred]


def evaluate(pred: Sequence[Pose], gt: Sequence[Pose]) -> EvalReport:
    if len(pred) != len(gt):
        raise EvalError(f"{len(pred)} predictions vs {len(gt)} ground-truth poses")
    if not pred:
        raise EvalError("nothing to evaluate")
    aligned = align_to_first(pred, gt)
    rot = [np.degrees(rot_distance(a.omega, b.omega)) for a, b in zip(aligned, gt)]
    trans = [trans_distance(a.t, b.t) for a, b in zip(aligned, gt)]
    return EvalReport.from_errors(rot, trans)


def cumulative_curve(
    report: EvalReport, axis: str = "rot", n_points: int = 50, thresholds: Sequence[float] | None = None
) -> list[tuple[float, float]]:
    """Fraction of frames whose error is at most each threshold.

    Thresholds default to ``n_points`` evenly spaced values from 0 to the
    largest error (just the largest error when ``n_points`` is 1).
    """
    if axis not in ("rot", "trans"):
        raise EvalError("axis must be 'rot' or 'trans'")
    errs = np.asarray(report.cdf_rot if axis == "rot" else report.cdf_trans)
    if errs.size == 0:
        raise EvalError("empty report")
    if thresholds is None:
        # always end at the largest error so the curve reaches 1
        thresholds = np.linspace(0.0, errs[-1], n_points) if n_points > 1 else errs[-1:]
    counts = np.searchsorted(errs, np.asarray(thresholds, dtype=np.float64), side="right")
    return [(float(t), float(c) / errs.size) for t, c in zip(thresholds, counts)]


def _atomic_write(path: Path, text: str) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def write_report(report: EvalReport | None, out, extra: dict | None = None, n_points: int = 50) -> list[Path]:
    """Emit report.csv, summary.json, cdf_rot.csv and cdf_trans.csv.

    With ``report=None`` (no ground truth) only summary.json is written, with
    the supervised metrics set to null.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"median_rot_deg": None, "median_trans": None, "supervision": "absent"}
    paths = []
    if report is not None:
        summary = dict(report.summary(), supervision="present")
        rows = [(k, r, t) for k, (r, t) in enumerate(report.errors)]
        _atomic_write(out / "report.csv", _csv_text(["frame", "rot_deg", "trans"], rows))
        paths.append(out / "report.csv")
        for axis in ("rot", "trans"):
            curve = cumulative_curve(report, axis, n_points)
            _atomic_write(out / f"cdf_{axis}.csv", _csv_text(["threshold", "fraction"], curve))
            paths.append(out / f"cdf_{axis}.csv")
    if extra:
        summary.update(extra)
    _atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True))
    paths.append(out / "summary.json")
    return paths
