"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

The pipeline-level checks take a while (about half an hour on one core);
select them with ``pytest tests/test_acceptance.py``.
"""

import math
import time

import numpy as np
import pytest
from scipy.integrate import quad

from conftest import random_perturbation
from surfelpose.association import Detection, InstanceMask, associate
from surfelpose.camera import CameraIntrinsics
from surfelpose.config import config_from_dict
from surfelpose.dataset import SceneSource
from surfelpose.metrics import AUC_CAP, ObjectModel, add_s, auc_adds, reconstruction_error
from surfelpose.pipeline import run_pipeline
from surfelpose.pose_fusion import EkfTrack, PoseMeasurement, init_track, measurement_noise, update
from surfelpose.pose_math import RigidTransform, pose_minus, pose_plus
from surfelpose.providers import SyntheticOracle
from surfelpose.registration import estimate_pose
from surfelpose.report import report_digest
from surfelpose.runner import execute
from surfelpose.scene_sim import default_scene
from surfelpose.surfel_map import (
    NO_INSTANCE, InstanceRecord, RenderedView, Surfel, update_class_probability, update_nonbackground,
)

ORACLE_NOISE = {"sigma_t": 0.02, "sigma_r": math.radians(5.0), "p_out": 0.05}


def verdict(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


def random_pose(rng, scale=0.1):
    w = rng.normal(size=3)
    return RigidTransform.from_rotvec(w / np.linalg.norm(w) * rng.uniform(0, math.pi), rng.normal(size=3) * scale)


# -- multi-view fusion against single-view measurements -------------------------------


def test_multi_view_beats_single_view(tmp_path, capsys):
    fused_auc, single_auc, fused_err, single_err, seconds = [], [], [], [], []
    for seed in range(20):
        cfg = config_from_dict({"output_dir": str(tmp_path / f"run{seed}"), "seed": seed, "oracle": ORACLE_NOISE,
                                "detector": {"erode_px": 2}})
        t0 = time.perf_counter()
        ev = execute(cfg, plot=False).evaluation
        seconds.append(time.perf_counter() - t0)
        names = [r.name for r in ev.report.per_object]
        assert all(ev.fused[n] for n in names)
        fused_auc.append(np.mean([auc_adds(ev.fused[n], ev.cap) for n in names]))
        single_auc.append(np.mean([auc_adds(ev.single[n], ev.cap) for n in names]))
        fused_err.append(np.mean([np.mean(ev.fused[n]) for n in names]))
        single_err.append(np.mean([np.mean(ev.single[n]) for n in names]))
    gain = np.mean(fused_auc) - np.mean(single_auc)
    ratio = np.mean(fused_err) / np.mean(single_err)
    ok = gain >= 0.05 and ratio <= 0.5 and max(seconds) <= 120.0
    verdict(capsys, "multi_view_beats_single_view", ok,
            f"AUC fused {np.mean(fused_auc):.3f} vs single {np.mean(single_auc):.3f} (gain {100 * gain:.1f} pp, "
            f"need >= 5); ADD-S ratio {ratio:.3f} (need <= 0.5); slowest run {max(seconds):.0f} s (need <= 120)")


# -- label refinement ------------------------------------------------------------------


def test_refinement_improves_segmentation(capsys):
    spec = default_scene()
    models = spec.models()
    gains = []
    for seed in range(10):
        cfg = config_from_dict({"output_dir": "unused", "seed": seed, "n_frames": 71, "detector": {"erode_px": 2}})
        source = SceneSource(spec, seed, {"depth_sigma": 0.001, "dropout_prob": 0.01})
        res = run_pipeline(cfg, source, SyntheticOracle(cfg.oracle, seed),
                           {o.instance: o.label for o in spec.objects}, models)
        last = res.iou[14]
        assert len(res.iou) == 15 and last["frame"] == 70
        gains.append(np.mean(list(last["projected"].values())) - np.mean(list(last["raw"].values())))
    ok = min(gains) >= 0.03
    verdict(capsys, "refinement_improves_segmentation", ok,
            f"IoU gain at the 15th keyframe: min {min(gains):.3f}, mean {np.mean(gains):.3f} over 10 seeds "
            f"(need >= 0.03 each)")


# -- registration ------------------------------------------------------------------------


def test_registration_recovers_perturbations(small_map, capsys):
    rng = np.random.default_rng(1)
    P = small_map.pose
    clean = []
    for _ in range(100):
        Q = pose_plus(P, random_perturbation(rng))
        e = pose_minus(estimate_pose(small_map.frame_at(Q), small_map.view, P).pose, Q)
        clean.append((np.linalg.norm(e.dt), np.linalg.norm(e.dr)))
    clean = np.array(clean)
    hits = int(np.sum((clean[:, 0] <= 1e-3) & (clean[:, 1] <= 1e-3)))
    noisy = []
    for _ in range(50):
        Q = pose_plus(P, random_perturbation(rng))
        e = pose_minus(estimate_pose(small_map.frame_at(Q, 0.002, rng), small_map.view, P).pose, Q)
        noisy.append((np.linalg.norm(e.dt), np.linalg.norm(e.dr)))
    med_t, med_r = np.median(np.array(noisy), axis=0)
    ok = hits == 100 and med_t < 5e-3 and med_r < math.radians(0.5)
    verdict(capsys, "registration_recovers_perturbations", ok,
            f"noise-free {hits}/100 within 1 mm / 1 mrad (worst {clean[:, 0].max() * 1e3:.3f} mm, "
            f"{clean[:, 1].max() * 1e3:.3f} mrad); 2 mm depth noise median {med_t * 1e3:.3f} mm, "
            f"{math.degrees(med_r):.4f} deg")


# -- filter algebra ----------------------------------------------------------------------


def test_filter_algebra(capsys):
    rng = np.random.default_rng(0)
    p, r = 0.02, 0.005
    t = EkfTrack(RigidTransform.identity(), p * np.eye(6), 1)
    recursion = 0.0
    for k in range(1, 51):
        t = update(t, PoseMeasurement(random_pose(rng, 0.05), r))
        recursion = max(recursion, float(np.abs(t.P - np.eye(6) / (1 / p + k / r)).max()))

    A = rng.normal(size=(6, 6))
    t = EkfTrack(random_pose(rng), A @ A.T * 1e-3 + 1e-4 * np.eye(6), 1)
    for i in range(10_000):
        mu = float(10 ** rng.uniform(-5, -1))
        R = measurement_noise(mu, diameter=0.2) if i % 3 == 0 else None
        t = update(t, PoseMeasurement(random_pose(rng), mu), R)
        if i % 100 == 99:
            t = EkfTrack(t.estimate, t.P + A @ A.T * 1e-4, 1, t.updates)
    asym = float(np.abs(t.P - t.P.T).max())
    min_eig = float(np.linalg.eigvalsh(t.P).min())

    truth = RigidTransform.from_rotvec([0.2, -0.1, 0.4], [0.1, 0.2, 0.05])
    sigma = np.array([0.02] * 3 + [0.05] * 3)
    first, final = [], []
    for _ in range(200):
        zs = [pose_plus(truth, rng.normal(size=6) * sigma) for _ in range(20)]
        t = init_track(PoseMeasurement(zs[0], 0.01), 1)
        for z in zs[1:]:
            t = update(t, PoseMeasurement(z, 0.01))
        first.append(np.linalg.norm(pose_minus(zs[0], truth).as_array()))
        final.append(np.linalg.norm(pose_minus(t.estimate, truth).as_array()))
    shrink = np.mean(final) / np.mean(first)

    ok = recursion <= 1e-9 and asym <= 1e-9 and min_eig >= -1e-12 and shrink < 0.35
    verdict(capsys, "filter_algebra", ok,
            f"isotropic recursion error {recursion:.1e}; after 1e4 updates asymmetry {asym:.1e}, "
            f"min eigenvalue {min_eig:.1e}; Monte Carlo error ratio {shrink:.3f} (need < 0.35)")


# -- probability fusion ------------------------------------------------------------------


def test_running_means_equal_batch_means(capsys):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        ps = rng.random(n)
        s = Surfel(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.01, np.zeros(3))
        for p in ps:
            s = update_nonbackground(s, float(p))
        worst = max(worst, abs(s.p_o - math.fsum(ps) / n))
        dists = rng.dirichlet(np.ones(4), size=n)
        rec = InstanceRecord(1, np.zeros(4), 0)
        for d in dists:
            rec = update_class_probability(rec, d)
        batch = np.array([math.fsum(dists[:, k]) / n for k in range(4)])
        worst = max(worst, float(np.abs(rec.class_probs - batch).max()))
    verdict(capsys, "running_means_equal_batch_means", worst <= 1e-12,
            f"worst deviation {worst:.1e} over 1000 sequences")


# -- metrics -----------------------------------------------------------------------------


def test_metric_oracles(capsys):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(4, 1001))
        pts = rng.normal(size=(n, 3)) * rng.uniform(0.01, 0.2)
        est, gt = random_pose(rng), random_pose(rng)
        a, b = est.apply(pts), gt.apply(pts)
        brute = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1)).min(1).mean()
        worst = max(worst, abs(add_s(ObjectModel("m", pts), est, gt) - brute))
        rec = pts[: max(1, n // 3)] + rng.normal(size=(max(1, n // 3), 3)) * 1e-3
        align = random_pose(rng, 0.05)
        brute = np.sqrt(((align.apply(rec)[:, None] - pts[None]) ** 2).sum(-1)).min(1).mean()
        worst = max(worst, abs(reconstruction_error(rec, ObjectModel("m", pts), align) - brute))

    auc_gap = 0.0
    for _ in range(30):
        e = np.sort(np.abs(rng.normal(0.0, 0.06, size=int(rng.integers(1, 40)))))
        breaks = sorted({0.0, AUC_CAP, *[x for x in e if x < AUC_CAP]})
        area = sum(quad(lambda th: np.mean(e <= th), lo, hi, limit=5)[0] for lo, hi in zip(breaks[:-1], breaks[1:]))
        auc_gap = max(auc_gap, abs(auc_adds(e) - area / AUC_CAP))

    ok = worst <= 1e-12 and auc_gap <= 1e-9 and AUC_CAP == 0.1
    verdict(capsys, "metric_oracles", ok,
            f"brute-force gap {worst:.1e} on 200 instances; AUC vs integration {auc_gap:.1e}; cap {AUC_CAP} m")


# -- association threshold ---------------------------------------------------------------


def test_association_threshold_is_strict(capsys):
    H, W = 30, 30
    inst = np.full((H, W), NO_INSTANCE)
    inst[:10, :10] = 1
    view = RenderedView(np.ones((H, W)), np.zeros((H, W, 3)), np.zeros((H, W, 3)), inst,
                        np.where(inst != NO_INSTANCE, 0, -1), RigidTransform.identity(),
                        CameraIntrinsics(50.0, 50.0, W / 2, H / 2, W, H))
    outcome = {}
    for covered in (29, 30, 31):
        m = np.zeros((H, W), bool)
        m.flat[np.flatnonzero(inst == 1)[:covered]] = True
        m.flat[np.flatnonzero(inst != 1)[: 100 - covered]] = True
        det = Detection([InstanceMask.from_soft(np.where(m, 0.9, 0.1), "a", 0.9)], ("a",))
        outcome[covered] = associate(det, view, [1], 0.3)[0].instance
    ok = outcome == {29: None, 30: None, 31: 1}
    verdict(capsys, "association_threshold_is_strict", ok,
            "overlap 0.29, 0.30 spawn and 0.31 associates" if ok else f"got {outcome}")


# -- end-to-end noise floor --------------------------------------------------------------


def test_noise_free_pipeline_floor(tmp_path, capsys):
    cfg = config_from_dict({"output_dir": str(tmp_path / "clean")})
    report = execute(cfg, plot=False).evaluation.report
    adds = {r.name: r.adds_mean for r in report.per_object}
    mu_d = {r.name: r.recon_mu_d for r in report.per_object}
    ok = len(adds) == 4 and all(v < 1e-3 for v in adds.values()) and all(v < 2e-3 for v in mu_d.values())
    verdict(capsys, "noise_free_pipeline_floor", ok,
            "ADD-S mm " + ", ".join(f"{k} {v * 1e3:.3f}" for k, v in adds.items())
            + "; surface error mm " + ", ".join(f"{k} {v * 1e3:.3f}" for k, v in mu_d.items()))


# -- determinism -------------------------------------------------------------------------


def test_identical_runs_give_identical_reports(tmp_path, capsys):
    digests = []
    for name in ("a", "b"):
        cfg = config_from_dict({"output_dir": str(tmp_path / name), "seed": 7, "n_frames": 25,
                                "oracle": ORACLE_NOISE, "scene_noise": {"depth_sigma": 0.001, "dropout_prob": 0.01}})
        out = execute(cfg)
        digests.append(report_digest(out.paths["json"]))
    ok = digests[0] == digests[1]
    verdict(capsys, "identical_runs_give_identical_reports", ok, f"report digest {digests[0][:16]}")
