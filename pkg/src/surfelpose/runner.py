"""Execute a run config end to end and write every product to disk."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, stage_seed
from .dataset import DiskSource, SceneSource
from .pipeline import RunResult, run_pipeline
from .pose_math import pose_minus
from .providers import SubprocessProvider, SyntheticOracle
from .report import Evaluation, evaluate_tracks, ground_truth_objects, track_log, write_ground_truth, write_models, \
    write_report
from .scene_sim import SceneSpec, default_scene

log = logging.getLogger("surfelpose")


class TooManySkipped(RuntimeError):
    """More frames failed registration than the config allows."""


def resolve(base_dir: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base_dir / q


def build_source(cfg: RunConfig, base_dir: Path = Path(".")):
    if cfg.frames is not None:
        return DiskSource(resolve(base_dir, cfg.frames))
    spec = default_scene() if cfg.scene == "default" else SceneSpec.load(resolve(base_dir, cfg.scene))
    return SceneSource(spec, stage_seed(cfg.seed, "scene"), cfg.scene_noise)


def build_provider(cfg: RunConfig):
    if cfg.provider.kind == "subprocess":
        return SubprocessProvider(cfg.provider.command)
    return SyntheticOracle(cfg.oracle, stage_seed(cfg.seed, "oracle"))


@dataclass
class RunOutcome:
    result: RunResult
    evaluation: Evaluation
    out_dir: Path
    paths: dict[str, Path]


def _write_frames(result: RunResult, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "keyframe", "skipped", "reg_iterations", "merged", "created", "cam_err_t_mm",
                    "cam_err_r_mrad"])
        for rec, est, gt in zip(result.frames, result.camera_poses, result.gt_camera_poses):
            e = pose_minus(est, gt)
            w.writerow([rec.index, int(rec.keyframe), int(rec.skipped), rec.reg_iterations, rec.merged, rec.created,
                        f"{np.linalg.norm(e.dt) * 1e3:.4f}", f"{np.linalg.norm(e.dr) * 1e3:.4f}"])


def execute(cfg: RunConfig, base_dir: Path = Path("."), plot: bool = True, source=None) -> RunOutcome:
    """Run the pipeline for ``cfg`` and write map, tracks, ground truth,
    models and the report into its output directory.

    Raises :class:`TooManySkipped` after writing the outputs if the skipped
    fraction exceeds ``cfg.max_skip_fraction``.
    """
    out = resolve(base_dir, cfg.output_dir)
    source = source if source is not None else build_source(cfg, base_dir)
    spec = source.spec
    models = spec.models(cfg.metrics.model_spacing)
    provider = build_provider(cfg)
    try:
        result = run_pipeline(cfg, source, provider, {o.instance: o.label for o in spec.objects}, models)
    finally:
        if hasattr(provider, "close"):
            provider.close()

    out.mkdir(parents=True, exist_ok=True)
    paths = {"map": out / "map.ply", "tracks": out / "tracks.jsonl", "gt": out / "gt.json",
             "models": out / "models", "frames": out / "frames.csv", "config": out / "config.json"}
    result.map.export(paths["map"])
    tl = track_log(result, cfg.method)
    tl.write(paths["tracks"])
    objects = ground_truth_objects(spec)
    write_ground_truth(objects, paths["gt"])
    write_models(models, paths["models"])
    _write_frames(result, paths["frames"])
    paths["config"].write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True) + "\n")

    ev = evaluate_tracks(tl.rows, objects, models, cfg.metrics.adds_max_points, cfg.metrics.auc_cap, result.map)
    meta = {"seed": cfg.seed, "method": cfg.method, "frames": len(result.frames),
            "skipped_fraction": result.skipped_fraction,
            "measurement_masks": cfg.association.measurement_masks,
            "camera_tracking": cfg.camera_tracking}
    paths.update(write_report(ev, out, meta, plot))
    log.info(json.dumps({"event": "run_complete", "output_dir": str(out), "skipped_fraction": result.skipped_fraction}))
    if result.skipped_fraction > cfg.max_skip_fraction:
        raise TooManySkipped(f"{result.skipped_fraction:.1%} of frames skipped "
                             f"(limit {cfg.max_skip_fraction:.1%})")
    return RunOutcome(result, ev, out, paths)
