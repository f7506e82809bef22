"""Synthetic RGB-D world: primitive object models, scene layout, camera
trajectories and ground-truth frame rendering.

Primitives are ray cast analytically so rendered depth lies exactly on the
object surfaces. Objects given only as point models (PLY) fall back to the
surfel splatter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import raster
from .camera import CameraIntrinsics, RgbdFrame, default_intrinsics, ray_directions
from .metrics import ObjectModel
from .pose_math import (
    RigidTransform, compose, inverse, matrix_to_rotvec, pose_from_json, pose_to_json,
    rotvec_to_matrix, rotz, translate,
)

BACKGROUND = 0
_NEAR = 1e-6


@dataclass(frozen=True)
class Primitive:
    kind: str  # box | cylinder | sphere | plane
    dims: tuple[float, ...]

    def __post_init__(self):
        need = {"box": 3, "cylinder": 2, "sphere": 1, "plane": 2}
        if self.kind not in need:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        dims = tuple(float(d) for d in self.dims)
        if len(dims) != need[self.kind]:
            raise ValueError(f"{self.kind} takes {need[self.kind]} dimensions")
        if not all(np.isfinite(d) and d > 0 for d in dims):
            raise ValueError(f"degenerate {self.kind} dimensions {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def diameter(self) -> float:
        if self.kind == "box":
            return math.sqrt(sum(d * d for d in self.dims))
        if self.kind == "cylinder":
            r, h = self.dims
            return math.hypot(2 * r, h)
        if self.kind == "sphere":
            return 2 * self.dims[0]
        return math.hypot(*self.dims)

    @property
    def surface_area(self) -> float:
        if self.kind == "box":
            a, b, c = self.dims
            return 2 * (a * b + b * c + a * c)
        if self.kind == "cylinder":
            r, h = self.dims
            return 2 * math.pi * r * h + 2 * math.pi * r * r
        if self.kind == "sphere":
            return 4 * math.pi * self.dims[0] ** 2
        return self.dims[0] * self.dims[1]


def _grid(n_a: int, n_b: int, la: float, lb: float):
    a = (np.arange(n_a) + 0.5) / n_a * la - la / 2
    b = (np.arange(n_b) + 0.5) / n_b * lb - lb / 2
    A, B = np.meshgrid(a, b, indexing="ij")
    return A.ravel(), B.ravel()


def sample_primitive(prim: Primitive, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Surface points and outward normals at roughly ``spacing`` apart."""
    if not spacing > 0:
        raise ValueError("sample spacing must be positive")
    pts, nrm = [], []
    if prim.kind == "box":
        half = np.array(prim.dims) / 2
        for axis in range(3):
            o1, o2 = [k for k in range(3) if k != axis]
            l1, l2 = prim.dims[o1], prim.dims[o2]
            A, B = _grid(max(1, round(l1 / spacing)), max(1, round(l2 / spacing)), l1, l2)
            for sign in (-1.0, 1.0):
                p = np.zeros((len(A), 3))
                p[:, o1], p[:, o2], p[:, axis] = A, B, sign * half[axis]
                n = np.zeros_like(p)
                n[:, axis] = sign
                pts.append(p)
                nrm.append(n)
    elif prim.kind == "sphere":
        r = prim.dims[0]
        n = max(4, round(prim.surface_area / spacing ** 2))
        k = np.arange(n) + 0.5
        z = 1 - 2 * k / n
        phi = k * math.pi * (3 - math.sqrt(5))
        s = np.sqrt(1 - z * z)
        d = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts.append(r * d)
        nrm.append(d)
    elif prim.kind == "cylinder":
        r, h = prim.dims
        n_th = max(3, round(2 * math.pi * r / spacing))
        n_z = max(1, round(h / spacing))
        th = (np.arange(n_th) + 0.5) / n_th * 2 * math.pi
        zz = (np.arange(n_z) + 0.5) / n_z * h - h / 2
        T, Z = np.meshgrid(th, zz, indexing="ij")
        T, Z = T.ravel(), Z.ravel()
        side_n = np.stack([np.cos(T), np.sin(T), np.zeros_like(T)], axis=1)
        pts.append(np.stack([r * np.cos(T), r * np.sin(T), Z], axis=1))
        nrm.append(side_n)
        # caps: concentric rings, each ring holding ~circumference/spacing points
        n_rings = max(1, round(r / spacing))
        cap = [np.zeros((1, 2))]
        for i in range(1, n_rings + 1):
            rr = r * i / (n_rings + 0.5)
            m = max(3, round(2 * math.pi * rr / spacing))
            a = (np.arange(m) + 0.5 * (i % 2)) / m * 2 * math.pi
            cap.append(np.stack([rr * np.cos(a), rr * np.sin(a)], axis=1))
        cap = np.concatenate(cap)
        for sign in (-1.0, 1.0):
            p = np.column_stack([cap, np.full(len(cap), sign * h / 2)])
            pts.append(p)
            nrm.append(np.tile([0.0, 0.0, sign], (len(cap), 1)))
    else:
        A, B = _grid(max(1, round(prim.dims[0] / spacing)), max(1, round(prim.dims[1] / spacing)), *prim.dims)
        pts.append(np.column_stack([A, B, np.zeros_like(A)]))
        nrm.append(np.tile([0.0, 0.0, 1.0], (len(A), 1)))
    return np.concatenate(pts), np.concatenate(nrm)


def make_primitive(kind: str, dims: Sequence[float], sample_spacing: float, name: str | None = None) -> ObjectModel:
    prim = Primitive(kind, tuple(dims))
    pts, nrm = sample_primitive(prim, sample_spacing)
    return ObjectModel(name or kind, pts, prim.diameter, nrm)


@dataclass
class SceneObject:
    instance: int
    label: str
    pose: RigidTransform  # object -> world
    primitive: Primitive | None = None
    model: ObjectModel | None = None
    color: tuple[float, float, float] = (0.7, 0.7, 0.7)
    name: str = ""

    def __post_init__(self):
        if self.primitive is None and self.model is None:
            raise ValueError("scene object needs a primitive or a point model")
        if not self.name:
            self.name = self.label

    def point_model(self, spacing: float) -> ObjectModel:
        if self.primitive is not None:
            pts, nrm = sample_primitive(self.primitive, spacing)
            return ObjectModel(self.name, pts, self.primitive.diameter, nrm)
        return self.model


@dataclass
class Lighting:
    direction: tuple[float, float, float] = (0.4, -0.3, 0.85)  # towards the light
    ambient: float = 0.35
    shading: bool = True


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    trajectory: list[RigidTransform]  # camera -> world, per frame
    intr: CameraIntrinsics
    classes: tuple[str, ...]
    lighting: Lighting = field(default_factory=Lighting)
    ground: dict | None = None  # {"size": [sx, sy], "color": [...], "texture_period": p}
    noise: dict = field(default_factory=lambda: {"depth_sigma": 0.0, "dropout_prob": 0.0})
    model_spacing: float = 0.003

    def __post_init__(self):
        if not self.trajectory:
            raise ValueError("trajectory must be non-empty")
        ids = [o.instance for o in self.objects]
        if len(set(ids)) != len(ids) or BACKGROUND in ids:
            raise ValueError("instance ids must be unique and non-zero")
        for o in self.objects:
            if o.label not in self.classes:
                raise ValueError(f"object label {o.label!r} not in class set")

    def object(self, instance: int) -> SceneObject:
        for o in self.objects:
            if o.instance == instance:
                return o
        raise KeyError(instance)

    def models(self, spacing: float | None = None) -> dict[int, ObjectModel]:
        s = spacing or self.model_spacing
        return {o.instance: o.point_model(s) for o in self.objects}

    # JSON ---------------------------------------------------------------

    def to_json(self) -> dict:
        objs = []
        for o in self.objects:
            d = {"instance": o.instance, "class": o.label, "name": o.name, "pose": pose_to_json(o.pose),
                 "color": list(o.color)}
            if o.primitive is not None:
                d["primitive"] = {"kind": o.primitive.kind, "dims": list(o.primitive.dims)}
            else:
                d["model_ply"] = f"{o.name}.ply"
            objs.append(d)
        return {
            "intrinsics": self.intr.to_json(),
            "classes": list(self.classes),
            "objects": objs,
            "trajectory": {"poses": [pose_to_json(p) for p in self.trajectory]},
            "lighting": {"direction": list(self.lighting.direction), "ambient": self.lighting.ambient,
                         "shading": self.lighting.shading},
            "ground": self.ground,
            "noise": dict(self.noise),
            "model_spacing": self.model_spacing,
        }

    @classmethod
    def from_json(cls, d: dict, base_dir: Path | None = None) -> "SceneSpec":
        known = {"intrinsics", "classes", "objects", "trajectory", "lighting", "ground", "noise", "model_spacing"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown scene keys: {sorted(extra)}")
        intr = CameraIntrinsics.from_json(d["intrinsics"]) if "intrinsics" in d else default_intrinsics()
        objects = []
        for o in d.get("objects", []):
            prim = model = None
            if "primitive" in o:
                prim = Primitive(o["primitive"]["kind"], tuple(o["primitive"]["dims"]))
            elif "model_ply" in o:
                model = ObjectModel.read_ply(Path(base_dir or ".") / o["model_ply"], o.get("name"))
            objects.append(SceneObject(int(o["instance"]), o["class"], pose_from_json(o["pose"]), prim, model,
                                       tuple(o.get("color", (0.7, 0.7, 0.7))), o.get("name", "")))
        tr = d["trajectory"]
        if "poses" in tr:
            traj = [pose_from_json(p) for p in tr["poses"]]
        else:
            params = {k: v for k, v in tr.items() if k not in ("kind", "n_frames")}
            traj = make_trajectory(tr["kind"], params, int(tr["n_frames"]))
        light = Lighting(**d["lighting"]) if d.get("lighting") else Lighting()
        light.direction = tuple(light.direction)
        noise = {"depth_sigma": 0.0, "dropout_prob": 0.0}
        noise.update(d.get("noise") or {})
        return cls(objects, traj, intr, tuple(d["classes"]), light, d.get("ground"), noise,
                   float(d.get("model_spacing", 0.003)))

    @classmethod
    def load(cls, path) -> "SceneSpec":
        path = Path(path)
        return cls.from_json(json.loads(path.read_text()), path.parent)


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose with +z towards ``target``, +y pointing down."""
    p = np.asarray(position, float)
    z = np.asarray(target, float) - p
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, (1.0, 0.0, 0.0))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), p)


def make_trajectory(kind: str, params: dict, n_frames: int) -> list[RigidTransform]:
    """``orbit``: radius, height, target, start_angle (rad), arc (rad, default
    full circle); ``line``: start, end (pose JSON or RigidTransform)."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if kind == "orbit":
        radius = float(params.get("radius", 1.0))
        if not radius > 0:
            raise ValueError("orbit radius must be positive")
        height = float(params.get("height", 0.0))
        target = np.asarray(params.get("target", (0.0, 0.0, 0.0)), float)
        start = float(params.get("start_angle", 0.0))
        arc = float(params.get("arc", 2 * math.pi))
        full = abs(abs(arc) - 2 * math.pi) < 1e-12
        denom = n_frames if full or n_frames == 1 else n_frames - 1
        poses = []
        for k in range(n_frames):
            th = start + arc * k / denom
            pos = target + np.array([radius * math.cos(th), radius * math.sin(th), height])
            poses.append(look_at(pos, target))
        return poses
    if kind == "line":
        a, b = params["start"], params["end"]
        a = a if isinstance(a, RigidTransform) else pose_from_json(a)
        b = b if isinstance(b, RigidTransform) else pose_from_json(b)
        rel = matrix_to_rotvec(a.rotation.T @ b.rotation)
        poses = []
        for k in range(n_frames):
            s = 0.0 if n_frames == 1 else k / (n_frames - 1)
            R = a.rotation @ rotvec_to_matrix(s * rel)
            poses.append(RigidTransform(R, (1 - s) * a.translation + s * b.translation))
        return poses
    raise ValueError(f"unknown trajectory kind {kind!r}")


def default_scene(n_frames: int = 120, intr: CameraIntrinsics | None = None) -> SceneSpec:
    """Four primitives (two boxes, a cylinder, a sphere) on a textured plane,
    seen from a full orbit."""
    objects = [
        SceneObject(1, "box_a", compose(translate(0.14, 0.10, 0.075), rotz(0.4)),
                    Primitive("box", (0.10, 0.16, 0.15)), color=(0.85, 0.35, 0.25)),
        SceneObject(2, "box_b", compose(translate(-0.13, 0.12, 0.05), rotz(-0.3)),
                    Primitive("box", (0.14, 0.09, 0.10)), color=(0.25, 0.55, 0.85)),
        SceneObject(3, "cylinder", translate(-0.08, -0.14, 0.08),
                    Primitive("cylinder", (0.045, 0.16)), color=(0.3, 0.75, 0.35)),
        SceneObject(4, "sphere", translate(0.14, -0.13, 0.06),
                    Primitive("sphere", (0.06,)), color=(0.9, 0.8, 0.3)),
    ]
    traj = make_trajectory("orbit", {"radius": 0.75, "height": 0.55, "target": (0.0, 0.0, 0.05)}, n_frames)
    return SceneSpec(
        objects, traj, intr or default_intrinsics(), ("box_a", "box_b", "cylinder", "sphere"),
        ground={"size": [1.6, 1.6], "color": [0.6, 0.6, 0.6], "texture_period": 0.2},
    )


# -- rendering ---------------------------------------------------------------


def _intersect(prim: Primitive, o: np.ndarray, d: np.ndarray):
    """Ray/primitive hits in the object frame. Returns (t, normal), t=inf on miss."""
    n = len(o)
    t_hit = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        if prim.kind == "box":
            half = np.array(prim.dims) / 2
            t1 = (-half - o) / d
            t2 = (half - o) / d
            tnear = np.minimum(t1, t2)
            tfar = np.maximum(t1, t2)
            tnear = np.where(np.isnan(tnear), -np.inf, tnear)
            tfar = np.where(np.isnan(tfar), np.inf, tfar)
            t0 = tnear.max(axis=1)
            t1m = tfar.min(axis=1)
            hit = (t0 <= t1m) & (t0 > _NEAR)
            axis = tnear.argmax(axis=1)
            t_hit[hit] = t0[hit]
            rows = np.nonzero(hit)[0]
            normal[rows, axis[rows]] = -np.sign(d[rows, axis[rows]])
        elif prim.kind == "sphere":
            r = prim.dims[0]
            a = np.sum(d * d, axis=1)
            b = 2 * np.sum(o * d, axis=1)
            c = np.sum(o * o, axis=1) - r * r
            disc = b * b - 4 * a * c
            ok = disc >= 0
            t = (-b - np.sqrt(np.where(ok, disc, 0.0))) / (2 * a)
            hit = ok & (t > _NEAR)
            t_hit[hit] = t[hit]
            p = o[hit] + t[hit, None] * d[hit]
            normal[hit] = p / np.linalg.norm(p, axis=1, keepdims=True)
        elif prim.kind == "cylinder":
            r, h = prim.dims
            a = d[:, 0] ** 2 + d[:, 1] ** 2
            b = 2 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
            c = o[:, 0] ** 2 + o[:, 1] ** 2 - r * r
            disc = b * b - 4 * a * c
            ok = (disc >= 0) & (a > 0)
            ts = (-b - np.sqrt(np.where(ok, disc, 0.0))) / (2 * a)
            zs = o[:, 2] + ts * d[:, 2]
            side = ok & (ts > _NEAR) & (np.abs(zs) <= h / 2)
            t_hit[side] = ts[side]
            ps = o[side] + ts[side, None] * d[side]
            normal[side] = np.column_stack([ps[:, 0], ps[:, 1], np.zeros(len(ps))]) / r
            for sign in (-1.0, 1.0):
                tc = (sign * h / 2 - o[:, 2]) / d[:, 2]
                pc = o + tc[:, None] * d
                cap = (tc > _NEAR) & (pc[:, 0] ** 2 + pc[:, 1] ** 2 <= r * r) & (tc < t_hit) & (o[:, 2] * sign > h / 2)
                t_hit[cap] = tc[cap]
                normal[cap] = (0.0, 0.0, sign)
        else:  # plane z=0, finite, facing +z
            sx, sy = prim.dims
            t = -o[:, 2] / d[:, 2]
            p = o + t[:, None] * d
            hit = (t > _NEAR) & (np.abs(p[:, 0]) <= sx / 2) & (np.abs(p[:, 1]) <= sy / 2) & (o[:, 2] > 0)
            t_hit[hit] = t[hit]
            normal[hit] = (0.0, 0.0, 1.0)
    return t_hit, normal


def _shade(spec: SceneSpec, base: np.ndarray, n_world: np.ndarray) -> np.ndarray:
    if not spec.lighting.shading:
        return np.broadcast_to(base, n_world.shape).copy()
    L = np.asarray(spec.lighting.direction, float)
    L /= np.linalg.norm(L)
    lam = np.clip(n_world @ L, 0.0, None)
    k = spec.lighting.ambient + (1 - spec.lighting.ambient) * lam
    return np.clip(base * k[:, None], 0.0, 1.0)


@dataclass
class GroundTruth:
    masks: np.ndarray  # (H, W) instance id, 0 = background
    object_poses: dict[int, RigidTransform]  # object -> camera
    camera_pose: RigidTransform  # camera -> world


def render_clean(spec: SceneSpec, camera_pose: RigidTransform):
    """Noise-free depth, colour, world normals and instance map."""
    intr = spec.intr
    H, W = intr.shape
    dirs_c = ray_directions(intr).reshape(-1, 3)
    d_world = dirs_c @ camera_pose.rotation.T
    origin = camera_pose.translation
    depth = np.full(H * W, np.inf)
    color = np.zeros((H * W, 3))
    inst = np.zeros(H * W, dtype=np.int64)
    items: list[tuple[int, Primitive | None, RigidTransform, np.ndarray, SceneObject | None]] = []
    if spec.ground:
        g = spec.ground
        items.append((BACKGROUND, Primitive("plane", tuple(g.get("size", (2.0, 2.0)))),
                      pose_from_json(g["pose"]) if "pose" in g else RigidTransform(), np.asarray(g.get("color", (0.6,) * 3)), None))
    for o in spec.objects:
        items.append((o.instance, o.primitive, o.pose, np.asarray(o.color, float), o))
    for iid, prim, pose, base, obj in items:
        if prim is None:
            t, n_world = _splat_model(obj, camera_pose, intr)
        else:
            o_obj = pose.rotation.T @ (origin - pose.translation)
            d_obj = d_world @ pose.rotation
            t, n_obj = _intersect(prim, np.broadcast_to(o_obj, d_obj.shape), d_obj)
            n_world = n_obj @ pose.rotation.T
        closer = t < depth
        if not np.any(closer):
            continue
        depth[closer] = t[closer]
        inst[closer] = iid
        c = _shade(spec, base, n_world[closer])
        if iid == BACKGROUND and spec.ground.get("texture_period"):
            p = origin + depth[closer, None] * d_world[closer]
            w = 2 * math.pi / float(spec.ground["texture_period"])
            c = c * (0.8 + 0.2 * (np.sin(w * p[:, 0]) * np.sin(w * p[:, 1])))[:, None]
        color[closer] = c
    miss = ~np.isfinite(depth)
    depth[miss] = 0.0
    inst[miss] = BACKGROUND
    return depth.reshape(H, W), color.reshape(H, W, 3), inst.reshape(H, W)


def _splat_model(obj: SceneObject, camera_pose: RigidTransform, intr: CameraIntrinsics):
    model = obj.model
    pts = obj.pose.apply(model.points)
    nrm = obj.pose.rotate(model.normals) if model.normals is not None else np.zeros_like(pts)
    pc, nc = raster.to_camera(pts, nrm, camera_pose.rotation, camera_pose.translation)
    if model.normals is None:
        nc = -pc / np.linalg.norm(pc, axis=1, keepdims=True)
    spacing = np.sqrt(4 * math.pi * (model.diameter / 2) ** 2 / len(pts))
    depth, index = raster.splat(pc, nc, np.full(len(pts), spacing), intr)
    t = np.where(index >= 0, depth, np.inf).reshape(-1)
    n_world = np.zeros((t.size, 3))
    hit = index.reshape(-1) >= 0
    n_world[hit] = obj.pose.rotate(model.normals[index.reshape(-1)[hit]]) if model.normals is not None else 0.0
    return t, n_world


def render_frame(spec: SceneSpec, frame_index: int, noise: dict | None = None, seed: int = 0):
    """Render frame ``frame_index``. Returns (RgbdFrame, GroundTruth).

    Depth noise is Gaussian per valid pixel and dropout zeroes pixels; both
    are drawn from a generator seeded by ``(seed, frame_index)``.
    """
    if not 0 <= frame_index < len(spec.trajectory):
        raise IndexError(f"frame {frame_index} outside trajectory of {len(spec.trajectory)}")
    noise = dict(spec.noise if noise is None else noise)
    cam = spec.trajectory[frame_index]
    depth, color, inst = render_clean(spec, cam)
    sigma = float(noise.get("depth_sigma", 0.0))
    drop = float(noise.get("dropout_prob", 0.0))
    if sigma > 0 or drop > 0:
        rng = np.random.default_rng([seed, frame_index])
        valid = depth > 0
        if sigma > 0:
            depth = np.where(valid, depth + rng.normal(0.0, sigma, depth.shape), 0.0)
        if drop > 0:
            depth = np.where(rng.random(depth.shape) < drop, 0.0, depth)
    cam_inv = inverse(cam)
    gt = GroundTruth(inst, {o.instance: compose(cam_inv, o.pose) for o in spec.objects}, cam)
    return RgbdFrame(depth, color, spec.intr, frame_index), gt
