"""Single-view pose providers.

A provider answers ``measure(request) -> (object_to_camera, mu or None)``
for a :class:`~surfelpose.pose_fusion.ProviderRequest`, or raises
:class:`~surfelpose.pose_fusion.NoMeasurement`.

``SyntheticOracle`` looks up the ground truth and perturbs it.
``SubprocessProvider`` forwards requests to an external program over a
JSON-lines pipe, so a learned estimator can be plugged in.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass

import numpy as np

from .pose_fusion import NoMeasurement, ProviderRequest
from .pose_math import pose_from_json, pose_plus, pose_to_json
from .scene_sim import GroundTruth


@dataclass
class OracleNoise:
    sigma_t: float = 0.0  # metres, per axis
    sigma_r: float = 0.0  # radians, per axis of the rotation vector
    p_out: float = 0.0
    outlier_t: float = 0.2  # radius of the gross-error ball, metres
    outlier_r: float = 0.5  # radians

    def __post_init__(self):
        if self.sigma_t < 0 or self.sigma_r < 0:
            raise ValueError("noise scales must be non-negative")
        if not 0.0 <= self.p_out <= 1.0:
            raise ValueError("p_out outside [0, 1]")


def _uniform_ball(rng, radius: float) -> np.ndarray:
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return d * radius * rng.random() ** (1.0 / 3.0)


class SyntheticOracle:
    """Ground-truth object pose plus Gaussian noise on (dt, dr), replaced by
    a draw from a gross-error ball with probability ``p_out``.

    The object is the ground-truth instance covering most of the request
    mask. Draws are seeded by (seed, frame, object) so they do not depend on
    call order.
    """

    def __init__(self, noise: OracleNoise | None = None, seed: int = 0):
        self.noise = noise or OracleNoise()
        self.seed = seed
        self.ground_truth: GroundTruth | None = None

    def identify(self, req: ProviderRequest) -> int:
        if self.ground_truth is None:
            raise RuntimeError("oracle has no ground truth for this frame")
        ids = self.ground_truth.masks[req.full_mask]
        ids = ids[ids != 0]
        if len(ids) == 0:
            raise NoMeasurement("mask does not cover any object")
        vals, counts = np.unique(ids, return_counts=True)
        return int(vals[np.argmax(counts)])

    def draw(self, frame_index: int, gt_id: int) -> np.ndarray:
        n = self.noise
        rng = np.random.default_rng([self.seed, frame_index, gt_id])
        gauss = np.concatenate([rng.normal(0.0, 1.0, 3) * n.sigma_t, rng.normal(0.0, 1.0, 3) * n.sigma_r])
        if n.p_out > 0 and rng.random() < n.p_out:
            return np.concatenate([_uniform_ball(rng, n.outlier_t), _uniform_ball(rng, n.outlier_r)])
        return gauss

    def measure(self, req: ProviderRequest):
        gt_id = self.identify(req)
        truth = self.ground_truth.object_poses[gt_id]
        return pose_plus(truth, self.draw(req.frame_index, gt_id)), None


class SubprocessProvider:
    """One JSON object per line each way.

    Request: ``{"frame", "instance", "class", "bbox", "camera_pose",
    "intrinsics", "depth", "color", "mask"}`` with the crops as nested lists.
    Response: ``{"pose": {...}, "mu": float | null}`` or
    ``{"no_measurement": "reason"}``.
    """

    def __init__(self, argv: list[str]):
        self.proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1)

    def measure(self, req: ProviderRequest):
        msg = {
            "frame": req.frame_index, "instance": req.instance, "class": req.class_label,
            "bbox": list(req.bbox), "camera_pose": pose_to_json(req.camera_pose),
            "intrinsics": req.intr.to_json() if req.intr is not None else None,
            "depth": np.round(req.depth, 6).tolist(), "color": np.round(req.color, 6).tolist(),
            "mask": req.mask.astype(int).tolist(),
        }
        self.proc.stdin.write(json.dumps(msg) + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise RuntimeError("provider process closed its output")
        resp = json.loads(line)
        if "no_measurement" in resp:
            raise NoMeasurement(str(resp["no_measurement"]))
        mu = resp.get("mu")
        return pose_from_json(resp["pose"]), None if mu is None else float(mu)

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
