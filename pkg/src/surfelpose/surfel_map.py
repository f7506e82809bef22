"""Surfel scene model with per-instance semantic fusion and splat rendering.

The map is stored column-wise (one numpy array per attribute) because every
operation touches all surfels at once. Class probabilities live on
:class:`InstanceRecord` objects, one vector per object instance, so their
storage scales with the number of instances rather than the number of
surfels.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import raster
from .camera import CameraIntrinsics, RgbdFrame, backproject, project, ray_directions
from .pose_math import RigidTransform, inverse

NO_INSTANCE = -1

# projective association thresholds used when fusing a frame
ASSOC_DEPTH_GAP = 0.05
ASSOC_NORMAL_COS = math.cos(math.radians(30.0))
DEFAULT_INACTIVE_WINDOW = 200


class SizeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Surfel:
    position: np.ndarray
    normal: np.ndarray
    radius: float
    color: np.ndarray
    instance_id: int | None = None
    p_o: float = 0.0
    obs_count: int = 0
    refine_confidence: int = 0
    last_seen: int = 0

    def __post_init__(self):
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-6:
            raise ValueError("surfel normal must be unit length")
        if not self.radius > 0:
            raise ValueError("surfel radius must be positive")
        if not 0.0 <= self.p_o <= 1.0:
            raise ValueError("p_o outside [0, 1]")
        if self.refine_confidence < 0:
            raise ValueError("negative refinement confidence")


def running_mean(mean, count: int, sample):
    """Fold one more sample into a mean of ``count`` samples."""
    return mean * (count / (count + 1.0)) + sample / (count + 1.0)


def update_nonbackground(surfel: Surfel, p_frame: float) -> Surfel:
    """Average a new per-frame non-background probability into ``surfel.p_o``."""
    if not 0.0 <= p_frame <= 1.0:
        raise ValueError(f"probability {p_frame} outside [0, 1]")
    p_o = running_mean(surfel.p_o, surfel.obs_count, p_frame)
    return dataclasses.replace(surfel, p_o=float(min(max(p_o, 0.0), 1.0)), obs_count=surfel.obs_count + 1)


@dataclass(frozen=True, eq=False)
class InstanceRecord:
    id: int
    class_probs: np.ndarray
    obs_count: int = 0

    def __post_init__(self):
        probs = np.array(self.class_probs, dtype=float)
        probs.setflags(write=False)
        object.__setattr__(self, "class_probs", probs)

    @property
    def label_index(self) -> int:
        return int(np.argmax(self.class_probs))


def update_class_probability(rec: InstanceRecord, frame_dist) -> InstanceRecord:
    """Running arithmetic mean of the per-frame class distributions."""
    d = np.asarray(frame_dist, dtype=float)
    if d.shape != rec.class_probs.shape:
        raise ValueError(f"distribution has {d.size} entries, expected {rec.class_probs.size}")
    if np.any(d < 0) or np.any(d > 1):
        raise ValueError("class probabilities must lie in [0, 1]")
    t = rec.obs_count
    return InstanceRecord(rec.id, running_mean(rec.class_probs, t, d), t + 1)


@dataclass
class FusionStats:
    merged: int
    created: int
    p_o_updates: int


@dataclass(eq=False)
class RenderedView:
    depth: np.ndarray  # (H, W) metres, 0 = no hit
    color: np.ndarray  # (H, W, 3)
    normal: np.ndarray  # (H, W, 3) global frame
    instance_map: np.ndarray  # (H, W) instance id or -1
    surfel_index_map: np.ndarray  # (H, W) surfel index or -1
    pose: RigidTransform
    intr: CameraIntrinsics

    @property
    def valid(self) -> np.ndarray:
        return self.surfel_index_map >= 0

    def vertices(self) -> np.ndarray:
        """Global-frame vertex map (H, W, 3)."""
        return self.pose.apply(backproject(self.depth, self.intr))

    def downsample(self, factor: int) -> "RenderedView":
        s = (slice(None, None, factor), slice(None, None, factor))
        return RenderedView(self.depth[s], self.color[s], self.normal[s], self.instance_map[s],
                            self.surfel_index_map[s], self.pose, self.intr.scaled(factor))


class SurfelMap:
    """Unordered surfel list plus instance records.

    ``weight`` counts the frames merged into a surfel's geometry;
    ``obs_count`` counts the frames that contributed to ``p_o`` (only
    frames with a segmentation contribute). ``normal_ok`` is False while a
    surfel's normal is only a placeholder (it was created where the frame
    normal was unreliable).
    """

    _fields = {
        "position": ((3,), np.float64),
        "normal": ((3,), np.float64),
        "radius": ((), np.float64),
        "color": ((3,), np.float64),
        "instance_id": ((), np.int64),
        "p_o": ((), np.float64),
        "obs_count": ((), np.int64),
        "weight": ((), np.float64),
        "refine_confidence": ((), np.int64),
        "last_seen": ((), np.int64),
        "active": ((), np.bool_),
        "normal_ok": ((), np.bool_),
    }

    def __init__(self, classes: Sequence[str]):
        if len(classes) == 0 or len(set(classes)) != len(classes):
            raise ValueError("class set must be non-empty and unique")
        self.classes = tuple(classes)
        for name, (shape, dtype) in self._fields.items():
            setattr(self, name, np.zeros((0,) + shape, dtype=dtype))
        self.instances: dict[int, InstanceRecord] = {}
        self._next_instance = 1
        self.refine_last_check: int | None = None

    def __len__(self) -> int:
        return len(self.radius)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise ValueError(f"unknown class label {label!r}") from None

    def surfel(self, i: int) -> Surfel:
        inst = int(self.instance_id[i])
        return Surfel(
            self.position[i].copy(), self.normal[i].copy(), float(self.radius[i]), self.color[i].copy(),
            None if inst == NO_INSTANCE else inst, float(self.p_o[i]), int(self.obs_count[i]),
            int(self.refine_confidence[i]), int(self.last_seen[i]),
        )

    def set_surfel(self, i: int, s: Surfel) -> None:
        self.position[i] = s.position
        self.normal[i] = s.normal
        self.radius[i] = s.radius
        self.color[i] = s.color
        self.instance_id[i] = NO_INSTANCE if s.instance_id is None else s.instance_id
        self.p_o[i] = s.p_o
        self.obs_count[i] = s.obs_count
        self.refine_confidence[i] = s.refine_confidence
        self.last_seen[i] = s.last_seen

    def add_surfels(self, position, normal, radius, color, instance_id=None, p_o=None,
                    obs_count=None, last_seen=0, normal_ok=True) -> np.ndarray:
        """Append surfels; returns their indices."""
        n = len(radius)
        new = {
            "position": np.asarray(position, float).reshape(n, 3),
            "normal": np.asarray(normal, float).reshape(n, 3),
            "radius": np.asarray(radius, float).reshape(n),
            "color": np.asarray(color, float).reshape(n, 3),
            "instance_id": np.full(n, NO_INSTANCE) if instance_id is None else np.asarray(instance_id).reshape(n),
            "p_o": np.zeros(n) if p_o is None else np.asarray(p_o, float).reshape(n),
            "obs_count": np.zeros(n, np.int64) if obs_count is None else np.broadcast_to(obs_count, (n,)),
            "weight": np.ones(n),
            "refine_confidence": np.zeros(n, np.int64),
            "last_seen": np.broadcast_to(np.asarray(last_seen, np.int64), (n,)),
            "active": np.ones(n, bool),
            "normal_ok": np.broadcast_to(np.asarray(normal_ok, bool), (n,)),
        }
        start = len(self)
        for name, (_, dtype) in self._fields.items():
            setattr(self, name, np.concatenate([getattr(self, name), new[name].astype(dtype)]))
        return np.arange(start, start + n)

    # instances -------------------------------------------------------------

    def new_instance(self, class_dist=None) -> int:
        iid = self._next_instance
        self._next_instance += 1
        rec = InstanceRecord(iid, np.zeros(self.n_classes), 0)
        if class_dist is not None:
            rec = update_class_probability(rec, class_dist)
        self.instances[iid] = rec
        return iid

    def observe_instance(self, iid: int, class_dist) -> None:
        self.instances[iid] = update_class_probability(self.instances[iid], class_dist)

    def class_probability_storage(self) -> int:
        """Number of floats held for class probabilities."""
        return sum(rec.class_probs.size for rec in self.instances.values())

    def instance_points(self, iid: int) -> np.ndarray:
        return self.position[self.instance_id == iid]

    # persistence -------------------------------------------------------------

    def export(self, ply_path, json_path=None) -> None:
        ply_path = Path(ply_path)
        json_path = Path(json_path) if json_path else ply_path.with_suffix(".json")
        n = len(self)
        rgb = np.clip(np.rint(self.color * 255.0), 0, 255).astype(int)
        lines = [
            "ply", "format ascii 1.0", f"element vertex {n}",
            *(f"property float {p}" for p in ("x", "y", "z", "nx", "ny", "nz")),
            *(f"property uchar {p}" for p in ("red", "green", "blue")),
            "property float radius", "property int instance_id", "property float p_o", "end_header",
        ]
        body = [
            "%.9g %.9g %.9g %.9g %.9g %.9g %d %d %d %.9g %d %.9g" % (
                *self.position[i], *self.normal[i], *rgb[i], self.radius[i], self.instance_id[i], self.p_o[i])
            for i in range(n)
        ]
        ply_path.write_text("\n".join(lines + body) + "\n")
        payload = {
            "classes": list(self.classes),
            "instances": [
                {"id": rec.id, "class_probs": [float(p) for p in rec.class_probs], "obs_count": rec.obs_count}
                for rec in sorted(self.instances.values(), key=lambda r: r.id)
            ],
        }
        json_path.write_text(json.dumps(payload, indent=1, sort_keys=True))

    @classmethod
    def load(cls, ply_path, json_path=None) -> "SurfelMap":
        ply_path = Path(ply_path)
        json_path = Path(json_path) if json_path else ply_path.with_suffix(".json")
        meta = json.loads(json_path.read_text())
        m = cls(meta["classes"])
        for rec in meta["instances"]:
            m.instances[int(rec["id"])] = InstanceRecord(int(rec["id"]), rec["class_probs"], int(rec["obs_count"]))
        if m.instances:
            m._next_instance = max(m.instances) + 1
        names, count = read_ply_header(ply_path)
        expected = ["x", "y", "z", "nx", "ny", "nz", "red", "green", "blue", "radius", "instance_id", "p_o"]
        if names != expected:
            raise ValueError(f"unexpected PLY properties {names}")
        data = read_ply_ascii(ply_path, count, len(names))
        m.add_surfels(
            data[:, 0:3], data[:, 3:6], data[:, 9], data[:, 6:9] / 255.0,
            instance_id=data[:, 10].astype(np.int64), p_o=data[:, 11],
        )
        nrm = np.linalg.norm(m.normal, axis=1, keepdims=True)
        m.normal = m.normal / np.maximum(nrm, 1e-12)
        return m


def read_ply_header(path) -> tuple[list[str], int]:
    names, count = [], 0
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path} is not a PLY file")
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise ValueError("only ASCII PLY is supported")
            if tok[0] == "element" and tok[1] == "vertex":
                count = int(tok[2])
            elif tok[0] == "property":
                names.append(tok[-1])
            elif tok[0] == "end_header":
                break
    return names, count


def read_ply_ascii(path, count: int, ncols: int) -> np.ndarray:
    with open(path) as fh:
        for line in fh:
            if line.strip() == "end_header":
                break
        data = np.loadtxt(fh, ndmin=2, max_rows=count) if count else np.zeros((0, ncols))
    return data.reshape(count, ncols)


def splat_render(m: SurfelMap, camera_pose: RigidTransform, intr: CameraIntrinsics,
                 active_only: bool = False) -> RenderedView:
    """Render depth, colour, normals and instance labels of the map."""
    H, W = intr.height, intr.width
    if active_only:
        ids = np.nonzero(m.active)[0]
    else:
        ids = None
    pos = m.position if ids is None else m.position[ids]
    nrm = m.normal if ids is None else m.normal[ids]
    rad = m.radius if ids is None else m.radius[ids]
    pc, nc = raster.to_camera(pos, nrm, camera_pose.rotation, camera_pose.translation)
    depth, index = raster.splat(pc, nc, rad, intr)
    if ids is not None and len(ids):
        index = np.where(index >= 0, ids[np.maximum(index, 0)], -1)
    hit = index >= 0
    safe = np.maximum(index, 0)
    color = np.where(hit[..., None], m.color[safe] if len(m) else np.zeros((H, W, 3)), 0.0)
    normal = np.where(hit[..., None], m.normal[safe] if len(m) else np.zeros((H, W, 3)), 0.0)
    inst = np.where(hit, m.instance_id[safe] if len(m) else -1, NO_INSTANCE)
    return RenderedView(depth, color, normal, inst, index, camera_pose, intr)


def predicted_instance_mask(view: RenderedView, iid: int) -> np.ndarray:
    return view.instance_map == iid


def refresh_instances(view: RenderedView, m: SurfelMap) -> None:
    """Re-read instance labels for an existing view after labels changed."""
    hit = view.surfel_index_map >= 0
    view.instance_map = np.where(hit, m.instance_id[np.maximum(view.surfel_index_map, 0)], NO_INSTANCE)


def fuse_frame(m: SurfelMap, frame: RgbdFrame, camera_pose: RigidTransform,
               pixel_instances: np.ndarray | None = None, pixel_p_o: np.ndarray | None = None,
               view: RenderedView | None = None) -> FusionStats:
    """Merge an RGB-D frame into the map.

    Each valid pixel is associated with the surfel rendered at that pixel
    from ``camera_pose`` if the depths differ by less than 5 cm and the
    normals by less than 30 degrees (normals are only compared where the
    frame normal is well defined). Every associated surfel is updated once,
    from the pixel nearest to its projected centre, with an average weighted
    by its fused-frame count. Unassociated pixels spawn new surfels.
    """
    intr = frame.intr
    shape = intr.shape
    for name, arr in (("pixel_instances", pixel_instances), ("pixel_p_o", pixel_p_o)):
        if arr is not None and arr.shape != shape:
            raise SizeMismatchError(f"{name} has shape {arr.shape}, frame is {shape}")
    if view is None:
        view = splat_render(m, camera_pose, intr)
    elif view.depth.shape != shape:
        raise SizeMismatchError("rendered view does not match frame size")
    if pixel_p_o is not None and (np.any(pixel_p_o < 0) or np.any(pixel_p_o > 1)):
        raise ValueError("pixel_p_o outside [0, 1]")

    valid = frame.valid
    depth = np.where(valid, frame.depth, 0.0)
    Vc = backproject(depth, intr)
    Nc, nok = frame.normals()
    Nc = _fallback_normals(Nc, nok, valid, depth, intr)
    Vg = camera_pose.apply(Vc)
    Ng = camera_pose.rotate(Nc)

    idx = view.surfel_index_map
    cand = valid & (idx >= 0)
    safe = np.maximum(idx, 0)
    gap_ok = np.abs(depth - view.depth) < ASSOC_DEPTH_GAP
    surfel_n_ok = np.where(idx >= 0, m.normal_ok[safe] if len(m) else False, False)
    normal_ok = ~nok | ~surfel_n_ok | (np.sum(Ng * view.normal, axis=-1) > ASSOC_NORMAL_COS)
    matched = cand & gap_ok & normal_ok

    # Disks bleed over silhouettes, so a background pixel can be covered by
    # a foreground disk. Such pixels fall back to the surfel whose centre
    # projects onto them.
    idx2 = _centre_index(m, camera_pose, intr, depth)
    safe2 = np.maximum(idx2, 0)
    n2_ok = ~nok | ~np.where(idx2 >= 0, m.normal_ok[safe2] if len(m) else False, False) | (
        np.sum(Ng * (m.normal[safe2] if len(m) else 0.0), axis=-1) > ASSOC_NORMAL_COS)
    extra = valid & ~matched & (idx2 >= 0) & n2_ok
    idx = np.where(matched, idx, np.where(extra, idx2, -1))
    matched |= extra

    # one update per surfel: the matched pixel closest to its projection
    pv, pu = np.nonzero(matched)
    sid = idx[pv, pu]
    merged = 0
    p_o_updates = 0
    if len(sid):
        pc = inverse(camera_pose).apply(m.position[sid])
        us, vs = project(pc, intr)
        dist = (pu - us) ** 2 + (pv - vs) ** 2
        order = np.lexsort((dist, sid))
        first = np.ones(len(order), bool)
        first[1:] = sid[order][1:] != sid[order][:-1]
        sel = order[first]
        s, v, u = sid[sel], pv[sel], pu[sel]
        w = m.weight[s][:, None]
        m.position[s] = (m.position[s] * w + Vg[v, u]) / (w + 1.0)
        m.color[s] = (m.color[s] * w + frame.color[v, u]) / (w + 1.0)
        good_n = nok[v, u]
        had_n = m.normal_ok[s]
        n_new = m.normal[s] * w + Ng[v, u]
        n_new /= np.linalg.norm(n_new, axis=1, keepdims=True)
        n_new = np.where(had_n[:, None], n_new, Ng[v, u])
        m.normal[s] = np.where(good_n[:, None], n_new, m.normal[s])
        m.normal_ok[s] = had_n | good_n
        m.radius[s] = np.minimum(m.radius[s], depth[v, u] / intr.fx)
        m.weight[s] += 1.0
        m.last_seen[sid] = frame.index
        if pixel_p_o is not None:
            c = m.obs_count[s]
            m.p_o[s] = np.clip(running_mean(m.p_o[s], c, pixel_p_o[v, u]), 0.0, 1.0)
            m.obs_count[s] = c + 1
            p_o_updates = len(s)
        if pixel_instances is not None:
            lab = pixel_instances[v, u]
            has = lab != NO_INSTANCE
            m.instance_id[s[has]] = lab[has]
        merged = len(s)

    new = valid & ~matched
    nv, nu = np.nonzero(new)
    created = len(nv)
    if created:
        m.add_surfels(
            Vg[nv, nu], Ng[nv, nu], depth[nv, nu] / intr.fx, frame.color[nv, nu],
            instance_id=None if pixel_instances is None else pixel_instances[nv, nu],
            p_o=None if pixel_p_o is None else pixel_p_o[nv, nu],
            obs_count=0 if pixel_p_o is None else 1,
            last_seen=frame.index,
            normal_ok=nok[nv, nu],
        )
    return FusionStats(merged=merged, created=created, p_o_updates=p_o_updates)


def _centre_index(m: SurfelMap, camera_pose: RigidTransform, intr: CameraIntrinsics,
                  depth: np.ndarray) -> np.ndarray:
    """Per pixel, the active surfel whose centre rounds to it with the
    smallest depth difference below the association gap (-1 if none)."""
    H, W = intr.shape
    out = np.full((H, W), -1, dtype=np.int64)
    ids = np.nonzero(m.active)[0]
    if len(ids) == 0:
        return out
    pc = inverse(camera_pose).apply(m.position[ids])
    z = pc[:, 2]
    front = z > 1e-6
    ids, pc, z = ids[front], pc[front], z[front]
    u, v = project(pc, intr)
    u = np.floor(u + 0.5).astype(np.int64)
    v = np.floor(v + 0.5).astype(np.int64)
    inside = (u >= 0) & (u < W) & (v >= 0) & (v < H)
    ids, u, v, z = ids[inside], u[inside], v[inside], z[inside]
    gap = np.abs(depth[v, u] - z)
    ok = (depth[v, u] > 0) & (gap < ASSOC_DEPTH_GAP)
    ids, pix, gap = ids[ok], (v * W + u)[ok], gap[ok]
    order = np.lexsort((ids, gap, pix))
    pix, ids = pix[order], ids[order]
    first = np.ones(len(pix), bool)
    first[1:] = pix[1:] != pix[:-1]
    out.reshape(-1)[pix[first]] = ids[first]
    return out


def _fallback_normals(N, nok, valid, depth, intr):
    """Where the estimate is unreliable, keep the raw estimate if it exists,
    otherwise face the camera."""
    bad = valid & (np.linalg.norm(N, axis=-1) < 0.5)
    if np.any(bad):
        rays = ray_directions(intr)[bad]
        N = N.copy()
        N[bad] = -rays / np.linalg.norm(rays, axis=1, keepdims=True)
    return N


def mark_active_objects(m: SurfelMap, frame_index: int, window: int = DEFAULT_INACTIVE_WINDOW) -> SurfelMap:
    """Object surfels stay active; background surfels unseen for more than
    ``window`` frames are flagged inactive."""
    m.active = (m.instance_id != NO_INSTANCE) | (frame_index - m.last_seen <= window)
    return m
