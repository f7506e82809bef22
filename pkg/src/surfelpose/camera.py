"""Pinhole camera model, RGB-D frames and per-pixel image helpers.

Images are stored as numpy arrays indexed ``[v, u]`` (row, column); pixel
centres sit on integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_DEPTH = 0.1
MAX_DEPTH = 10.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics of the image subsampled as ``img[::factor, ::factor]``."""
        return CameraIntrinsics(
            self.fx / factor,
            self.fy / factor,
            self.cx / factor,
            self.cy / factor,
            (self.width + factor - 1) // factor,
            (self.height + factor - 1) // factor,
        )

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_json(cls, d) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(260.0, 260.0, 159.5, 119.5, 320, 240)


def rgb_to_intensity(color: np.ndarray) -> np.ndarray:
    """Luma weights 0.299 R + 0.587 G + 0.114 B."""
    return color[..., 0] * 0.299 + color[..., 1] * 0.587 + color[..., 2] * 0.114


@dataclass(eq=False)
class RgbdFrame:
    depth: np.ndarray  # (H, W) metres, 0 or NaN = invalid
    color: np.ndarray  # (H, W, 3) in [0, 1]
    intr: CameraIntrinsics
    index: int = 0
    intensity: np.ndarray | None = None  # (H, W) in [0, 1]
    _valid: np.ndarray | None = field(default=None, repr=False)
    _normals: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.depth.shape != self.intr.shape:
            raise ValueError(f"depth shape {self.depth.shape} != intrinsics {self.intr.shape}")
        if self.color.shape != self.intr.shape + (3,):
            raise ValueError("color shape does not match depth")
        if self.intensity is None:
            self.intensity = rgb_to_intensity(self.color)
        elif self.intensity.shape != self.intr.shape:
            raise ValueError("intensity shape does not match depth")

    @property
    def valid(self) -> np.ndarray:
        if self._valid is None:
            d = self.depth
            with np.errstate(invalid="ignore"):
                self._valid = np.isfinite(d) & (d > MIN_DEPTH) & (d < MAX_DEPTH)
        return self._valid

    def normals(self) -> tuple[np.ndarray, np.ndarray]:
        """Cached camera-frame normal map and its reliability mask."""
        if self._normals is None:
            self._normals = estimate_normals(np.where(self.valid, self.depth, 0.0), self.valid, self.intr)
        return self._normals


def pixel_grid(intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.mgrid[0 : intr.height, 0 : intr.width]
    return u.astype(float), v.astype(float)


def backproject(depth: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """(H, W) depth -> (H, W, 3) camera-frame points (invalid depth gives 0/NaN rows)."""
    u, v = pixel_grid(intr)
    d = np.nan_to_num(depth, nan=0.0)
    return np.stack([(u - intr.cx) / intr.fx * d, (v - intr.cy) / intr.fy * d, d], axis=-1)


def ray_directions(intr: CameraIntrinsics) -> np.ndarray:
    """Per-pixel ray directions with unit z component, (H, W, 3)."""
    u, v = pixel_grid(intr)
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def project(points: np.ndarray, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame (N, 3) points -> subpixel (u, v). Caller checks z > 0."""
    z = points[..., 2]
    return intr.fx * points[..., 0] / z + intr.cx, intr.fy * points[..., 1] / z + intr.cy


def _shift(a: np.ndarray, dv: int, du: int, fill=0.0) -> np.ndarray:
    """out[v, u] = a[v + dv, u + du] with ``fill`` outside."""
    out = np.full_like(a, fill)
    H, W = a.shape[:2]
    vs = slice(max(0, -dv), min(H, H - dv))
    us = slice(max(0, -du), min(W, W - du))
    vs_src = slice(max(0, dv), min(H, H + dv))
    us_src = slice(max(0, du), min(W, W + du))
    out[vs, us] = a[vs_src, us_src]
    return out


def smooth_depth(depth: np.ndarray, valid: np.ndarray, sigma_px: float = 1.0,
                 sigma_range: float = 0.01, radius: int = 2) -> np.ndarray:
    """Edge-preserving (bilateral) smoothing used only for normal estimation."""
    d = np.where(valid, depth, 0.0)
    acc = np.zeros_like(d)
    wsum = np.zeros_like(d)
    for dv in range(-radius, radius + 1):
        for du in range(-radius, radius + 1):
            nd = _shift(d, dv, du)
            nv = _shift(valid, dv, du, False)
            w = np.exp(-(du * du + dv * dv) / (2 * sigma_px ** 2)) * np.exp(
                -((nd - d) ** 2) / (2 * sigma_range ** 2)
            )
            w = np.where(nv, w, 0.0)
            acc += w * nd
            wsum += w
    out = np.where(valid & (wsum > 0), acc / np.maximum(wsum, 1e-300), 0.0)
    return out


def estimate_normals(depth: np.ndarray, valid: np.ndarray, intr: CameraIntrinsics,
                     smooth: bool = True, planarity: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame unit normals from central differences of the vertex map.

    Returns ``(normals, ok)``. Normals are zero where a neighbour is missing.
    ``ok`` is additionally False where the vertex map bends too sharply
    (second difference larger than ``planarity`` times the pixel step), i.e.
    on creases, where the normal is kept but should not be trusted. Normals
    point towards the camera.
    """
    d = smooth_depth(depth, valid) if smooth else np.where(valid, depth, 0.0)
    V = backproject(d, intr)
    right, left = _shift(V, 0, 1), _shift(V, 0, -1)
    down, up = _shift(V, 1, 0), _shift(V, -1, 0)
    ok = valid.copy()
    for dv, du in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        ok &= _shift(valid, dv, du, False)
    dx = right - left
    dy = down - up
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 0
    n = n / np.maximum(norm, 1e-300)[..., None]
    flip = np.sum(n * V, axis=-1) > 0
    n[flip] *= -1
    n[~ok] = 0.0
    step = 0.5 * np.minimum(np.linalg.norm(dx, axis=-1), np.linalg.norm(dy, axis=-1))
    bend_x = np.linalg.norm(right + left - 2 * V, axis=-1)
    bend_y = np.linalg.norm(down + up - 2 * V, axis=-1)
    ok &= (bend_x <= planarity * step) & (bend_y <= planarity * step)
    return n, ok


def bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Sample ``img`` at subpixel (u, v) and return value plus exact derivatives
    of the bilinear interpolant. Caller guarantees 0 <= u < W-1, 0 <= v < H-1.
    """
    u0 = np.floor(u).astype(np.intp)
    v0 = np.floor(v).astype(np.intp)
    a = u - u0
    b = v - v0
    i00 = img[v0, u0]
    i10 = img[v0, u0 + 1]
    i01 = img[v0 + 1, u0]
    i11 = img[v0 + 1, u0 + 1]
    val = (1 - a) * (1 - b) * i00 + a * (1 - b) * i10 + (1 - a) * b * i01 + a * b * i11
    du = (1 - b) * (i10 - i00) + b * (i11 - i01)
    dv = (1 - a) * (i01 - i00) + a * (i11 - i10)
    return val, du, dv
