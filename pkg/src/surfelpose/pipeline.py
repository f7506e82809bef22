"""Per-frame mapping and object pose pipeline.

Frame order: register against the view rendered at the previous pose,
render at the new pose, (keyframes) detect and associate, fuse, render the
updated map, (keyframes) refine labels, then measure every visible instance
and update its filter.
"""

from __future__ import annotations

import json
import logging
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import association as assoc
from .config import RunConfig, stage_seed
from .metrics import AUC_CAP, ObjectModel, add_s, auc_adds, reconstruction_error
from .pose_fusion import (
    EkfTrack, NoMeasurement, PoseMeasurement, crop_request, init_track, measurement_noise,
    predict, single_view_measure, update,
)
from .pose_math import RigidTransform, compose, inverse, pose_minus
from .registration import RegistrationError, estimate_pose
from .surfel_map import (
    NO_INSTANCE, SurfelMap, fuse_frame, mark_active_objects, refresh_instances, splat_render,
)

log = logging.getLogger("surfelpose")

MAX_JUMP_T = 0.15  # registration results further than this from the prediction are rejected
MAX_JUMP_R = 0.35


@dataclass
class FrameRecord:
    index: int
    keyframe: bool
    skipped: bool
    reg_iterations: int = 0
    reg_cost: float = 0.0
    merged: int = 0
    created: int = 0
    seconds: float = 0.0


@dataclass
class RunResult:
    map: SurfelMap
    camera_poses: list[RigidTransform]
    gt_camera_poses: list[RigidTransform]
    tracks: dict[int, EkfTrack]
    # per map instance: list of (frame, filter state after the update, single-view measurement)
    history: dict[int, list[tuple[int, EkfTrack, PoseMeasurement]]]
    votes: dict[int, Counter]
    frames: list[FrameRecord]
    iou: list[dict] = field(default_factory=list)  # keyframe segmentation diagnostics

    @property
    def skipped_fraction(self) -> float:
        return sum(f.skipped for f in self.frames) / max(len(self.frames), 1)


def _predict_camera(poses: list[RigidTransform]) -> RigidTransform:
    if len(poses) < 2:
        return poses[-1]
    delta = compose(poses[-1], inverse(poses[-2]))
    return compose(delta, poses[-1])


def _jump(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    v = pose_minus(a, b)
    return float(np.linalg.norm(v.dt)), float(np.linalg.norm(v.dr))


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 1.0


def run_pipeline(cfg: RunConfig, source, provider, gt_classes: dict[int, str],
                 models: dict[int, ObjectModel] | None = None) -> RunResult:
    """Run every frame of ``source`` (indexable, yielding FrameBundles).

    ``gt_classes`` maps ground-truth instance ids to class labels and feeds
    the synthetic detector; ``models`` (model-frame points per ground-truth
    id) are needed by providers that return no mu of their own.
    """
    classes = tuple(source.spec.classes)
    m = SurfelMap(classes)
    intr = source.intr
    n = len(source) if cfg.n_frames is None else min(cfg.n_frames, len(source))
    det_seed = stage_seed(cfg.seed, "detector")
    refine = cfg.association.refine_params()
    poses: list[RigidTransform] = []
    gt_poses: list[RigidTransform] = []
    tracks: dict[int, EkfTrack] = {}
    history: dict[int, list] = defaultdict(list)
    votes: dict[int, Counter] = defaultdict(Counter)
    records: list[FrameRecord] = []
    iou_log: list[dict] = []
    prev_view = None

    for i in range(n):
        t0 = time.perf_counter()
        bundle = source[i]
        frame, gt = bundle.frame, bundle.gt
        if hasattr(provider, "ground_truth"):
            provider.ground_truth = gt
        gt_poses.append(gt.camera_pose)
        keyframe = i % cfg.association.keyframe_every == 0
        rec = FrameRecord(i, keyframe, False)

        # 1. camera tracking
        if i == 0 or cfg.camera_tracking == "ground_truth":
            cam = gt.camera_pose  # the first frame anchors the global frame
        else:
            guess = _predict_camera(poses)
            try:
                res = estimate_pose(frame, prev_view, guess, cfg.registration)
                dt, dr = _jump(res.pose, guess)
                if dt > MAX_JUMP_T or dr > MAX_JUMP_R:
                    raise RegistrationError(f"jump of {dt:.3f} m / {dr:.3f} rad from the prediction")
                cam = res.pose
                rec.reg_iterations, rec.reg_cost = res.iterations, res.final_cost
            except RegistrationError as e:
                log.warning(json.dumps({"event": "registration_failed", "frame": i, "reason": str(e)}))
                rec.skipped = True
                cam = guess
        poses.append(cam)
        if rec.skipped:
            records.append(rec)
            prev_view = splat_render(m, cam, intr, active_only=True)
            continue

        # 2. predicted view at the tracked pose
        view = splat_render(m, cam, intr, active_only=True)

        # 3. segmentation on keyframes
        pixel_inst = pixel_po = None
        det = None
        mask_of: dict[int, np.ndarray] = {}
        if keyframe:
            det = assoc.synthetic_detect(gt.masks, gt_classes, classes, cfg.detector,
                                         [det_seed, i], frame_index=i)
            links = assoc.associate(det, view, m.instances.keys(), cfg.association.overlap_threshold)
            pixel_inst = np.full(intr.shape, NO_INSTANCE, dtype=np.int64)
            for a in links:
                mk = det.masks[a.mask_index]
                dist = mk.distribution(classes)
                if a.instance is None:
                    iid = m.new_instance(dist)
                else:
                    iid = a.instance
                    m.observe_instance(iid, dist)
                pixel_inst[mk.binary] = iid
                mask_of[iid] = mk.binary
            pixel_po = det.pixel_p_o(intr.shape)

        # 4. fusion
        stats = fuse_frame(m, frame, cam, pixel_inst, pixel_po, view=view)
        rec.merged, rec.created = stats.merged, stats.created
        mark_active_objects(m, i, cfg.inactive_window)

        # 5. render the updated map, 6. refine labels
        view = splat_render(m, cam, intr, active_only=True)
        if keyframe and cfg.association.refine:
            st = assoc.refine_step(m, view, pixel_po, i, refine)
            if st.assigned:
                refresh_instances(view, m)
        if keyframe:
            iou_log.append(_segmentation_iou(i, view, det, gt.masks))

        # 7. measurements and filter updates
        for iid in sorted(m.instances):
            if cfg.association.measurement_masks == "raw":
                if iid not in mask_of:
                    continue
                mask = mask_of[iid]
            else:
                mask = view.instance_map == iid
            label = classes[m.instances[iid].label_index]
            try:
                meas = _measure(view, iid, provider, models, label, i, mask, cfg.provider.min_pixels)
            except NoMeasurement:
                continue
            gid_votes = gt.masks[mask & (view.depth > 0)]
            gid_votes = gid_votes[gid_votes != 0]
            if len(gid_votes):
                vals, cnt = np.unique(gid_votes, return_counts=True)
                votes[iid][int(vals[np.argmax(cnt)])] += 1
            if iid in tracks:
                R = None
                if cfg.ekf.anisotropic:
                    R = measurement_noise(meas.mu, cfg.ekf.mu_min, _diameter(models, votes[iid]))
                tracks[iid] = update(predict(tracks[iid]), meas, R, cfg.ekf.mu_min)
            else:
                tracks[iid] = init_track(meas, iid, cfg.ekf)
            history[iid].append((i, tracks[iid], meas))

        prev_view = view
        rec.seconds = time.perf_counter() - t0
        records.append(rec)
        log.info(json.dumps({"event": "frame", "frame": i, "keyframe": keyframe, "merged": rec.merged,
                             "created": rec.created, "surfels": len(m), "instances": len(m.instances),
                             "seconds": round(rec.seconds, 3)}))

    return RunResult(m, poses, gt_poses, tracks, dict(history), dict(votes), records, iou_log)


def _diameter(models, vote: Counter):
    if not models or not vote:
        return None
    return models[vote.most_common(1)[0][0]].diameter


def _measure(view, iid, provider, models, label, frame_index, mask, min_pixels):
    """mu needs the model of the measured object; an oracle provider can say
    which ground-truth object it answered for."""
    visible = mask & (view.depth > 0)
    if int(visible.sum()) < min_pixels:
        raise NoMeasurement(f"instance {iid} covers {int(visible.sum())} pixels")
    model_points = None
    if models is not None and hasattr(provider, "identify"):
        gid = provider.identify(crop_request(view, visible, label, iid, frame_index))
        model_points = models[gid].points
    return single_view_measure(view, iid, provider, model_points, label, frame_index, mask, min_pixels)


def _segmentation_iou(frame_index: int, view, det, gt_masks: np.ndarray) -> dict:
    """IoU against ground truth of the raw detection and of the map's
    reprojected labels, per ground-truth object (best-matching mask)."""
    out = {"frame": frame_index, "raw": {}, "projected": {}}
    for gid in (int(k) for k in np.unique(gt_masks) if k != 0):
        gt = gt_masks == gid
        raw = max((_mask_iou(mk.binary, gt) for mk in det.masks), default=0.0) if det else 0.0
        labels = view.instance_map[gt]
        labels = labels[labels != NO_INSTANCE]
        if len(labels):
            vals, cnt = np.unique(labels, return_counts=True)
            proj = _mask_iou(view.instance_map == vals[np.argmax(cnt)], gt)
        else:
            proj = 0.0
        out["raw"][gid] = raw
        out["projected"][gid] = proj
    return out


# -- evaluation ------------------------------------------------------------------


@dataclass
class ObjectErrors:
    gt_id: int
    name: str
    instance: int | None
    frames: list[int]
    fused: list[float]
    single: list[float]
    recon_mu_d: float


def instance_for_objects(result: RunResult) -> dict[int, int]:
    """Map ground-truth id -> map instance; among instances voting for the
    same object the one with the most filter updates wins."""
    best: dict[int, tuple[int, int]] = {}
    for iid, vote in result.votes.items():
        if not vote or iid not in result.tracks:
            continue
        gid = vote.most_common(1)[0][0]
        n = result.tracks[iid].updates
        if gid not in best or n > best[gid][0] or (n == best[gid][0] and iid < best[gid][1]):
            best[gid] = (n, iid)
    return {gid: iid for gid, (n, iid) in best.items()}


def evaluate_run(result: RunResult, spec, models: dict[int, ObjectModel], eval_models: dict[int, ObjectModel]):
    """Per-object ADD-S of the fused estimate and of the single-view
    measurement at every measured frame, plus surface error of the
    reconstructed instance. ``models`` are the dense reference surfaces,
    ``eval_models`` the (possibly subsampled) point sets used for ADD-S."""
    mapping = instance_for_objects(result)
    out = []
    for o in spec.objects:
        gid = o.instance
        iid = mapping.get(gid)
        frames, fused, single = [], [], []
        mu_d = float("nan")
        if iid is not None:
            for f, tr, meas in result.history[iid]:
                frames.append(f)
                fused.append(add_s(eval_models[gid], tr.estimate, o.pose))
                single.append(add_s(eval_models[gid], meas.pose, o.pose))
            pts = result.map.instance_points(iid)
            if len(pts):
                mu_d = reconstruction_error(pts, models[gid], inverse(o.pose))
        out.append(ObjectErrors(gid, o.name, iid, frames, fused, single, mu_d))
    return out


def summarize(errors: list[ObjectErrors], method: str, cap: float = AUC_CAP):
    from .metrics import EvalReport, ObjectResult

    rows = []
    for e in errors:
        errs = e.fused if method == "ekf" else e.single
        if errs:
            rows.append(ObjectResult(e.name, float(np.mean(errs)), auc_adds(errs, cap), e.recon_mu_d, len(errs), method))
        else:
            rows.append(ObjectResult(e.name, float("nan"), 0.0, e.recon_mu_d, 0, method))
    return EvalReport(rows)
