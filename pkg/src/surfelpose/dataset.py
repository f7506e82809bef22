"""Frame bundles on disk and in memory.

A frame bundle is written as binary netpbm images next to a per-frame JSON:

    NNNNNN_depth.pgm      16-bit, 0.1 mm units, 0 = invalid
    NNNNNN_intensity.pgm  8-bit grayscale
    NNNNNN_color.ppm      8-bit RGB
    NNNNNN_mask.pgm       8-bit, value = instance id, 0 = background
    NNNNNN.json           camera pose and object poses in the camera frame

``manifest.json`` at the top level lists the frames and embeds the scene
description. Frames served from memory go through the same quantisation so
both paths feed the pipeline identical numbers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, RgbdFrame, rgb_to_intensity
from .pose_math import RigidTransform, pose_from_json, pose_to_json
from .scene_sim import GroundTruth, SceneSpec, render_frame

DEPTH_SCALE = 1e4  # stored units per metre
DEPTH_MAX_CODE = 65535


# -- netpbm ------------------------------------------------------------------


def write_pnm(path, img: np.ndarray, maxval: int = 255) -> None:
    """Binary PGM (2-D) or PPM (H, W, 3) with the given maxval."""
    img = np.asarray(img)
    if img.ndim == 2:
        magic, (h, w) = b"P5", img.shape
    elif img.ndim == 3 and img.shape[2] == 3:
        magic, (h, w) = b"P6", img.shape[:2]
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    if img.min(initial=0) < 0 or img.max(initial=0) > maxval:
        raise ValueError("pixel values outside [0, maxval]")
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n%d\n" % (w, h, maxval))
        fh.write(np.ascontiguousarray(img, dtype=dtype).tobytes())


def read_pnm(path) -> tuple[np.ndarray, int]:
    """Returns (image, maxval) for binary P5/P6 files."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm type {magic!r}")
    ch = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * ch
    arr = np.frombuffer(data, dtype=dtype, count=n, offset=pos)
    shape = (h, w, 3) if ch == 3 else (h, w)
    return arr.reshape(shape).astype(np.int64), maxval


# -- quantisation ------------------------------------------------------------


def encode_depth(depth: np.ndarray) -> np.ndarray:
    code = np.rint(np.nan_to_num(depth, nan=0.0) * DEPTH_SCALE)
    code[(code < 0) | (code > DEPTH_MAX_CODE)] = 0
    return code.astype(np.uint16)


def encode_unit(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def quantize(depth: np.ndarray, color: np.ndarray, intr: CameraIntrinsics, index: int) -> RgbdFrame:
    """The frame exactly as it reads back from disk."""
    return RgbdFrame(
        encode_depth(depth) / DEPTH_SCALE,
        encode_unit(color) / 255.0,
        intr,
        index,
        encode_unit(rgb_to_intensity(color)) / 255.0,
    )


# -- frame sources -------------------------------------------------------------


@dataclass
class FrameBundle:
    frame: RgbdFrame
    gt: GroundTruth


class SceneSource:
    """Renders a scene on demand; frames are quantised like their disk form."""

    def __init__(self, spec: SceneSpec, seed: int = 0, noise: dict | None = None):
        self.spec = spec
        self.seed = seed
        self.noise = noise

    def __len__(self) -> int:
        return len(self.spec.trajectory)

    @property
    def intr(self) -> CameraIntrinsics:
        return self.spec.intr

    def __getitem__(self, i: int) -> FrameBundle:
        raw, gt = render_frame(self.spec, i, self.noise, self.seed)
        return FrameBundle(quantize(raw.depth, raw.color, raw.intr, i), gt)


class DiskSource:
    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / "manifest.json"
        if not manifest.is_file():
            raise FileNotFoundError(f"no manifest.json in {self.root}")
        self.manifest = json.loads(manifest.read_text())
        self.spec = SceneSpec.from_json(self.manifest["scene"], self.root)
        self.entries = self.manifest["frames"]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def intr(self) -> CameraIntrinsics:
        return self.spec.intr

    def __getitem__(self, i: int) -> FrameBundle:
        return read_bundle(self.root, self.entries[i], self.spec.intr)


def _names(i: int) -> dict:
    stem = f"{i:06d}"
    return {"index": i, "depth": f"{stem}_depth.pgm", "intensity": f"{stem}_intensity.pgm",
            "color": f"{stem}_color.ppm", "mask": f"{stem}_mask.pgm", "meta": f"{stem}.json"}


def write_bundle(root: Path, i: int, depth, color, gt: GroundTruth) -> dict:
    names = _names(i)
    if gt.masks.max(initial=0) > 255:
        raise ValueError("instance ids above 255 do not fit the 8-bit mask format")
    write_pnm(root / names["depth"], encode_depth(depth), 65535)
    write_pnm(root / names["intensity"], encode_unit(rgb_to_intensity(color)))
    write_pnm(root / names["color"], encode_unit(color))
    write_pnm(root / names["mask"], gt.masks.astype(np.uint8))
    meta = {
        "frame": i,
        "camera_pose": pose_to_json(gt.camera_pose),
        "objects": [{"instance": k, "pose_in_camera": pose_to_json(p)} for k, p in sorted(gt.object_poses.items())],
    }
    (root / names["meta"]).write_text(json.dumps(meta, indent=1, sort_keys=True))
    return names


def read_bundle(root: Path, entry: dict, intr: CameraIntrinsics) -> FrameBundle:
    depth, _ = read_pnm(root / entry["depth"])
    inten, _ = read_pnm(root / entry["intensity"])
    color, _ = read_pnm(root / entry["color"])
    mask, _ = read_pnm(root / entry["mask"])
    meta = json.loads((root / entry["meta"]).read_text())
    i = int(entry["index"])
    frame = RgbdFrame(depth / DEPTH_SCALE, color / 255.0, intr, i, inten / 255.0)
    poses = {int(o["instance"]): pose_from_json(o["pose_in_camera"]) for o in meta["objects"]}
    return FrameBundle(frame, GroundTruth(mask, poses, pose_from_json(meta["camera_pose"])))


def synthesize(spec: SceneSpec, out_dir, seed: int = 0) -> Path:
    """Render every frame of ``spec`` to ``out_dir``; returns the manifest path."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for o in spec.objects:
        if o.primitive is None:
            o.model.write_ply(root / f"{o.name}.ply")
    entries = []
    for i in range(len(spec.trajectory)):
        raw, gt = render_frame(spec, i, None, seed)
        entries.append(write_bundle(root, i, raw.depth, raw.color, gt))
    manifest = {"seed": seed, "n_frames": len(entries), "scene": spec.to_json(), "frames": entries}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def camera_trajectory(source) -> list[RigidTransform]:
    return [source[i].gt.camera_pose for i in range(len(source))]
