"""Deterministic CSV/JSON reporting of experiment records."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from ..metrics import MetricReport
from .experiments import ExperimentRecord

RECORD_COLUMNS = (
    ["experiment", "variant", "scenario_id", "category", "fold", "seed", "detector_seed",
     "pipeline", "status", "reason", "factor", "level", "u_x", "u_y", "s"]
    + MetricReport.columns()
    + ["hard_brake", "overtake_abandoned", "trace", "texture"]
)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def record_row(rec: ExperimentRecord) -> list[str]:
    row = {
        "experiment": rec.experiment, "variant": rec.variant, "scenario_id": rec.scenario_id,
        "category": rec.category, "fold": rec.fold, "seed": rec.seed,
        "detector_seed": rec.detector_seed, "pipeline": rec.pipeline, "status": rec.status,
        "reason": rec.reason, "factor": rec.factor, "level": rec.level,
        "u_x": rec.target.u[0] if rec.target else None,
        "u_y": rec.target.u[1] if rec.target else None,
        "s": rec.target.s if rec.target else None,
        "hard_brake": rec.hard_brake if rec.report else None,
        "overtake_abandoned": rec.overtake_abandoned if rec.report else None,
        "trace": rec.trace_path, "texture": rec.texture_path,
    }
    if rec.report is not None:
        row.update(rec.report.as_row())
    return [_fmt(row.get(c)) for c in RECORD_COLUMNS]


def records_csv(records: Sequence[ExperimentRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for rec in records:
        w.writerow(record_row(rec))
    return buf.getvalue()


def summarize(records: Sequence[ExperimentRecord], notes: dict | None = None) -> dict:
    """Metric means per (experiment, variant, pipeline, group) over the ok records.

    The group key is the factor level for sweeps and the category otherwise.
    """
    groups: dict = {}
    for rec in records:
        if not rec.ok or rec.report is None:
            continue
        group = f"{rec.factor}={rec.level}" if rec.factor else rec.category
        key = "/".join([rec.experiment, rec.variant, rec.pipeline, group])
        groups.setdefault(key, []).append(rec.report)
    out = {}
    for key in sorted(groups):
        reps = groups[key]
        means = {}
        for col in MetricReport.columns():
            vals = [getattr(r, col) for r in reps if not math.isnan(getattr(r, col))]
            means[col] = float(np.mean(vals)) if vals else None
        means["n"] = len(reps)
        out[key] = means
    if not out:
        return {}
    summary = {"groups": out,
               "counts": {s: sum(r.status == s for r in records)
                          for s in sorted({r.status for r in records})}}
    if notes:
        summary["notes"] = notes
    return summary


def report(records: Sequence[ExperimentRecord], out_dir, notes: dict | None = None) -> tuple[Path, Path]:
    """Write ``records.csv`` and ``summary.json``; identical records give identical bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in records:
        for ref in (rec.trace_path, rec.texture_path):
            if ref and not (out / ref).exists():
                raise FileNotFoundError(f"record {rec.scenario_id} references missing {ref}")
    csv_path = out / "records.csv"
    csv_path.write_text(records_csv(records), encoding="utf-8")
    json_path = out / "summary.json"
    json_path.write_text(json.dumps(summarize(records, notes), indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    return csv_path, json_path


def read_records_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def records_from_csv(path) -> list[ExperimentRecord]:
    """Rebuild records from a ``records.csv`` written by :func:`report`."""
    from ..attack import AttackTarget

    out = []
    for row in read_records_csv(path):
        rep = None
        if row["d3"] != "":
            rep = MetricReport(**{c: float(row[c]) for c in MetricReport.columns()})
        target = None
        if row["u_x"] != "":
            target = AttackTarget((float(row["u_x"]), float(row["u_y"])), float(row["s"]))
        out.append(ExperimentRecord(
            experiment=row["experiment"], scenario_id=row["scenario_id"], category=row["category"],
            variant=row["variant"], fold=int(row["fold"]), seed=int(row["seed"]),
            detector_seed=int(row["detector_seed"]), pipeline=row["pipeline"], status=row["status"],
            reason=row["reason"], factor=row["factor"], level=row["level"], target=target,
            report=rep, hard_brake=row["hard_brake"] == "1",
            overtake_abandoned=row["overtake_abandoned"] == "1",
            trace_path=row["trace"], texture_path=row["texture"],
        ))
    return out
