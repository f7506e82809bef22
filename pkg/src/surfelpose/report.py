"""Run products on disk: track logs, ground-truth and model files, and the
evaluation tables (CSV + JSON) with their accuracy-curve figure.

``evaluate_tracks`` is what both ``run`` and ``eval`` use to score a track
log, so the two commands agree on identical inputs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .metrics import AUC_CAP, EvalReport, ObjectModel, ObjectResult, add_s, auc_adds, reconstruction_error
from .pipeline import RunResult, instance_for_objects
from .pose_fusion import TrackLog
from .pose_math import RigidTransform, inverse, pose_from_json, pose_to_json

CSV_COLUMNS = ("object", "adds_mean_mm", "auc_percent", "recon_mu_d_mm", "method")
TIMESTAMP_KEY = "generated_at"


class EvalInputError(ValueError):
    pass


def track_log(result: RunResult, method: str) -> TrackLog:
    """Rows for every filter update, tagged with the ground-truth object the
    instance was matched to (None for instances that lost the match)."""
    owner = {iid: gid for gid, iid in instance_for_objects(result).items()}
    log = TrackLog()
    for iid in sorted(result.history):
        for frame, track, meas in result.history[iid]:
            log.record(frame, track, meas, method, owner.get(iid))
    log.rows.sort(key=lambda r: (r["frame"], r["instance"]))
    return log


# -- ground truth and models ---------------------------------------------------------


@dataclass
class GtObject:
    id: int
    name: str
    label: str
    pose: RigidTransform  # object -> global


def ground_truth_objects(spec) -> list[GtObject]:
    return [GtObject(o.instance, o.name, o.label, o.pose) for o in spec.objects]


def write_ground_truth(objects: list[GtObject], path) -> None:
    payload = {"objects": [{"id": o.id, "name": o.name, "class": o.label, "pose": pose_to_json(o.pose)}
                           for o in objects]}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def read_ground_truth(path) -> list[GtObject]:
    data = json.loads(Path(path).read_text())
    if "objects" in data and "frames" in data:  # a synthesized frame directory's manifest
        data = data["scene"]
    out = []
    for o in data["objects"]:
        oid = int(o.get("id", o.get("instance", 0)))
        out.append(GtObject(oid, o["name"], o["class"], pose_from_json(o["pose"])))
    return out


def write_models(models: dict[int, ObjectModel], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for gid in sorted(models):
        models[gid].write_ply(out_dir / f"{models[gid].name}.ply")


def read_models(model_dir, objects: list[GtObject]) -> dict[int, ObjectModel]:
    model_dir = Path(model_dir)
    missing = [o.name for o in objects if not (model_dir / f"{o.name}.ply").is_file()]
    if missing:
        raise EvalInputError(f"no model PLY in {model_dir} for: {', '.join(missing)}")
    return {o.id: ObjectModel.read_ply(model_dir / f"{o.name}.ply", o.name) for o in objects}


# -- evaluation ----------------------------------------------------------------------


@dataclass
class Evaluation:
    report: EvalReport
    fused: dict[str, list[float]]  # per object name, per logged frame
    single: dict[str, list[float]]
    cap: float


def evaluate_tracks(rows: list[dict], objects: list[GtObject], models: dict[int, ObjectModel],
                    max_points: int = 2000, cap: float = AUC_CAP, surfel_map=None) -> Evaluation:
    """Score logged estimates against ground truth.

    Rows whose ``object`` is None are ignored. Object ids not present in the
    ground truth are an error, as is a log that matches no object at all.
    ``surfel_map`` (optional) supplies the reconstructed instance points for
    the surface error.
    """
    gt_ids = {o.id for o in objects}
    logged = {r["object"] for r in rows if r.get("object") is not None}
    unknown = sorted(logged - gt_ids)
    if unknown:
        raise EvalInputError(f"track objects missing from ground truth: {unknown}")
    if not logged & gt_ids:
        raise EvalInputError("no track matches any ground-truth object")
    methods = {r["method"] for r in rows}
    if len(methods) > 1:
        raise EvalInputError(f"track log mixes methods {sorted(methods)}")
    method = methods.pop()

    results, fused, single = [], {}, {}
    for o in objects:
        mine = sorted((r for r in rows if r.get("object") == o.id), key=lambda r: r["frame"])
        model = models[o.id].subsample(max_points)
        fe = [add_s(model, pose_from_json(r["estimate"]), o.pose) for r in mine]
        se = [add_s(model, pose_from_json(r["measurement"]), o.pose) for r in mine]
        fused[o.name], single[o.name] = fe, se
        mu_d = float("nan")
        if surfel_map is not None and mine:
            pts = surfel_map.instance_points(int(mine[0]["instance"]))
            if len(pts):
                mu_d = reconstruction_error(pts, models[o.id], inverse(o.pose))
        if fe:
            results.append(ObjectResult(o.name, float(np.mean(fe)), auc_adds(fe, cap), mu_d, len(fe), method))
        else:
            results.append(ObjectResult(o.name, float("nan"), 0.0, mu_d, 0, method))
    return Evaluation(EvalReport(results), fused, single, cap)


# -- tables --------------------------------------------------------------------------


def _num(x: float, digits: int) -> str:
    return "nan" if not math.isfinite(x) else f"{x:.{digits}f}"


def report_csv(report: EvalReport) -> str:
    """Millimetres and percent; a final MEAN row averages the finite entries."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    method = report.per_object[0].method if report.per_object else ""
    for r in report.per_object:
        w.writerow([r.name, _num(r.adds_mean * 1e3, 4), _num(r.auc * 100.0, 2), _num(r.recon_mu_d * 1e3, 4),
                    r.method])
    agg = report.aggregate()
    w.writerow(["MEAN", _num(agg["adds_mean"] * 1e3, 4), _num(agg["auc"] * 100.0, 2),
                _num(agg["recon_mu_d"] * 1e3, 4), method])
    return buf.getvalue()


def _finite_or_none(x: float):
    return float(x) if math.isfinite(x) else None


def report_json(report: EvalReport, cap: float, meta: dict | None = None, timestamp: str | None = None) -> dict:
    agg = report.aggregate()
    return {
        TIMESTAMP_KEY: timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "auc_cap_m": cap,
        "objects": [{"name": r.name, "adds_mean_m": _finite_or_none(r.adds_mean), "auc": r.auc,
                     "recon_mu_d_m": _finite_or_none(r.recon_mu_d), "n_frames": r.n_frames, "method": r.method}
                    for r in report.per_object],
        "aggregate": {k: _finite_or_none(v) for k, v in agg.items()},
        "run": meta or {},
    }


def report_digest(path) -> str:
    """SHA-256 of a JSON report with the timestamp removed."""
    data = json.loads(Path(path).read_text())
    data.pop(TIMESTAMP_KEY, None)
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


def write_report(ev: Evaluation, out_dir, meta: dict | None = None, plot: bool = True) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / "report.csv", "json": out_dir / "report.json"}
    paths["csv"].write_text(report_csv(ev.report))
    paths["json"].write_text(json.dumps(report_json(ev.report, ev.cap, meta), indent=1, sort_keys=True) + "\n")
    if plot:
        from .plotting import plot_accuracy

        paths["svg"] = out_dir / "accuracy.svg"
        plot_accuracy(ev.fused, ev.single, ev.cap, paths["svg"])
    return paths
