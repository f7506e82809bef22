"""Per-object pose filter fusing single-view pose measurements.

The state is an object-to-global transform with a 6x6 covariance over the
local (dt, dr) parameterisation of :func:`pose_minus` / :func:`pose_plus`.
The process model is the identity (static scene) and the measurement model
is the identity in that parameterisation, so

    K = P (R + P)^-1,   x <- x (+) K (z (-) x),   P <- (I - K) P
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .pose_math import RigidTransform, pose_minus, pose_plus, pose_to_json

MU_MIN = 1e-4
SIGMA_T0 = 0.05
SIGMA_R0 = 0.1


class NoMeasurement(Exception):
    """The provider could not produce a measurement (e.g. object not visible)."""


class MeasurementError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PoseMeasurement:
    pose: RigidTransform  # object -> global
    mu: float
    frame_index: int = 0

    def __post_init__(self):
        if not np.isfinite(self.mu) or self.mu < 0:
            raise MeasurementError(f"invalid measurement scale mu={self.mu}")


@dataclass(frozen=True, eq=False)
class EkfTrack:
    estimate: RigidTransform
    P: np.ndarray
    instance: int
    updates: int = 0

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.shape != (6, 6):
            raise ValueError("covariance must be 6x6")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)

    @property
    def trace_P(self) -> float:
        return float(np.trace(self.P))


@dataclass
class EkfParams:
    sigma_t0: float = SIGMA_T0
    sigma_r0: float = SIGMA_R0
    mu_min: float = MU_MIN
    anisotropic: bool = False

    def __post_init__(self):
        if not (self.sigma_t0 > 0 and self.sigma_r0 > 0 and self.mu_min > 0):
            raise ValueError("EKF scales must be positive")


def initial_covariance(params: EkfParams | None = None) -> np.ndarray:
    p = params or EkfParams()
    return np.diag([p.sigma_t0 ** 2] * 3 + [p.sigma_r0 ** 2] * 3)


def init_track(m: PoseMeasurement, instance: int, params: EkfParams | None = None) -> EkfTrack:
    """The first measurement seeds the estimate; it counts as one update."""
    return EkfTrack(m.pose, initial_covariance(params), instance, 1)


def predict(track: EkfTrack) -> EkfTrack:
    """Static objects: the prediction is the previous posterior."""
    return track


def measurement_noise(mu: float, mu_min: float = MU_MIN, diameter: float | None = None) -> np.ndarray:
    """R = max(mu, mu_min) I. With ``diameter`` the rotational block is
    divided by it, giving radians from metres."""
    if not np.isfinite(mu) or mu < 0:
        raise ValueError(f"mu must be a non-negative number, got {mu}")
    s = max(float(mu), mu_min)
    d = np.full(6, s)
    if diameter is not None:
        if not diameter > 0:
            raise ValueError("diameter must be positive")
        d[3:] = s / diameter
    return np.diag(d)


def update(track: EkfTrack, m: PoseMeasurement, R: np.ndarray | None = None,
           mu_min: float = MU_MIN) -> EkfTrack:
    if not (np.all(np.isfinite(m.pose.rotation)) and np.all(np.isfinite(m.pose.translation))):
        raise MeasurementError("non-finite measurement pose")
    if R is None:
        R = measurement_noise(m.mu, mu_min)
    P = track.P
    K = P @ np.linalg.inv(R + P)
    nu = pose_minus(m.pose, track.estimate).as_array()
    x = pose_plus(track.estimate, K @ nu)
    P_new = (np.eye(6) - K) @ P
    P_new = 0.5 * (P_new + P_new.T)
    return EkfTrack(x, P_new, track.instance, track.updates + 1)


def compute_mu(object_points: np.ndarray, model_points: np.ndarray, pose: RigidTransform) -> float:
    """Mean distance from each segmented point to the nearest model point
    placed at ``pose``."""
    obj = np.asarray(object_points, float).reshape(-1, 3)
    mdl = np.asarray(model_points, float).reshape(-1, 3)
    if len(obj) == 0 or len(mdl) == 0:
        raise ValueError("compute_mu needs non-empty point sets")
    d, _ = cKDTree(pose.apply(mdl)).query(obj, k=1)
    return float(np.mean(d))


@dataclass
class TrackLog:
    """JSON-lines dump of filter states, one row per (frame, instance).

    ``estimate`` is the reported pose: the filter state for ``method="ekf"``
    and the latest measurement for ``method="single_view"``.
    """

    rows: list[dict] = field(default_factory=list)

    def record(self, frame: int, track: EkfTrack, meas: PoseMeasurement, method: str = "ekf",
               obj: int | None = None) -> None:
        est = track.estimate if method == "ekf" else meas.pose
        self.rows.append({
            "frame": int(frame), "instance": int(track.instance), "object": obj, "method": method,
            "estimate": pose_to_json(est), "measurement": pose_to_json(meas.pose),
            "mu": float(meas.mu), "trace_P": track.trace_P,
        })

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.rows))

    @staticmethod
    def read(path) -> list[dict]:
        rows = []
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        rows.append(json.loads(line))
                    except json.JSONDecodeError as e:
                        raise ValueError(f"{path}:{n}: {e}") from e
        return rows


# -- single-view measurements ---------------------------------------------------------

MIN_PIXELS = 50


@dataclass(eq=False)
class ProviderRequest:
    """What a single-view pose estimator sees: crops of the rendered view
    around one instance plus the camera pose it was rendered from."""

    depth: np.ndarray  # (h, w) crop, metres
    color: np.ndarray  # (h, w, 3) crop
    mask: np.ndarray  # (h, w) crop, bool
    bbox: tuple[int, int, int, int]  # v0, v1, u0, u1 in the full image
    full_mask: np.ndarray  # (H, W) bool
    camera_pose: RigidTransform
    class_label: str
    instance: int
    frame_index: int
    intr: object = None


def crop_request(view, mask: np.ndarray, class_label: str, instance: int, frame_index: int,
                 margin: int = 4) -> ProviderRequest:
    vs, us = np.nonzero(mask)
    H, W = mask.shape
    v0, v1 = max(int(vs.min()) - margin, 0), min(int(vs.max()) + margin + 1, H)
    u0, u1 = max(int(us.min()) - margin, 0), min(int(us.max()) + margin + 1, W)
    s = (slice(v0, v1), slice(u0, u1))
    return ProviderRequest(view.depth[s].copy(), view.color[s].copy(), mask[s].copy(), (v0, v1, u0, u1),
                           mask, view.pose, class_label, instance, frame_index, view.intr)


def single_view_measure(view, instance: int, provider, model_points: np.ndarray | None = None,
                        class_label: str = "", frame_index: int = 0, mask: np.ndarray | None = None,
                        min_pixels: int = MIN_PIXELS) -> PoseMeasurement:
    """Ask ``provider`` for the object-to-camera pose of ``instance`` in the
    rendered view, lift it to the global frame with the view's camera pose,
    and attach mu computed from the segmented rendered points.

    Raises :class:`NoMeasurement` if fewer than ``min_pixels`` pixels of the
    instance are visible or the provider declines.
    """
    if mask is None:
        mask = view.instance_map == instance
    mask = mask & (view.depth > 0)
    if int(mask.sum()) < min_pixels:
        raise NoMeasurement(f"instance {instance} covers {int(mask.sum())} pixels")
    req = crop_request(view, mask, class_label, instance, frame_index)
    obj_in_cam, mu = provider.measure(req)
    pose = view.pose @ obj_in_cam
    if mu is None:
        if model_points is None:
            raise ValueError("model points are needed to compute mu")
        mu = compute_mu(view.vertices()[mask], model_points, pose)
    return PoseMeasurement(pose, float(mu), frame_index)
