"""Z-buffered disk splatting of oriented points.

Every point facing the camera covers the pixels within ``max(1, r*fx/z)``
pixels of its projection (its own centre pixel always). The depth written at
a pixel is the intersection of that pixel's ray with the disk's plane, so
co-planar disks render one continuous plane from any viewpoint.

The depth test compares ``depth + (e / rho)^2 * z / fx``, where ``e`` is the
pixel's distance from the disk centre: among overlapping near-coplanar disks
the one centred closest to the pixel wins, while a surface more than one
pixel footprint in front always wins. Equal keys go to the lower point index.

``splat`` runs a compiled sequential kernel. ``splat_reference`` is a
vectorised numpy formulation of the same rule, kept as a test oracle.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .camera import CameraIntrinsics

NEAR = 0.05
MAX_SPLAT_PX = 6.0
REACH = 3.0  # accepted ray/plane hit distance, in disk radii
GRAZING = 0.2


@njit(cache=True)
def _splat_kernel(pc, nc, radius, fx, fy, cx, cy, W, H, depth, key, index):
    n = pc.shape[0]
    for i in range(n):
        x = pc[i, 0]
        y = pc[i, 1]
        z = pc[i, 2]
        if z <= NEAR:
            continue
        nx = nc[i, 0]
        ny = nc[i, 1]
        nz = nc[i, 2]
        ndotp = nx * x + ny * y + nz * z
        if ndotp >= 0.0:
            continue
        u = fx * x / z + cx
        v = fy * y / z + cy
        rho = radius[i] * fx / z
        if rho < 1.0:
            rho = 1.0
        if rho > MAX_SPLAT_PX:
            rho = MAX_SPLAT_PX
        ui = math.floor(u + 0.5)
        vi = math.floor(v + 0.5)
        R = int(math.ceil(rho))
        reach = radius[i]
        if z / fx > reach:
            reach = z / fx
        reach = REACH * reach
        for dv in range(-R, R + 1):
            py = int(vi) + dv
            if py < 0 or py >= H:
                continue
            for du in range(-R, R + 1):
                px = int(ui) + du
                if px < 0 or px >= W:
                    continue
                centre = du == 0 and dv == 0
                eu = px - u
                ev = py - v
                if not centre and eu * eu + ev * ev > rho * rho:
                    continue
                dx = (px - cx) / fx
                dy = (py - cy) / fy
                ndotd = nx * dx + ny * dy + nz
                dlen = math.sqrt(dx * dx + dy * dy + 1.0)
                d = z
                if abs(ndotd) >= GRAZING * dlen:
                    t = ndotp / ndotd
                    ox = t * dx - x
                    oy = t * dy - y
                    oz = t - z
                    off = math.sqrt(ox * ox + oy * oy + oz * oz)
                    if t > 0.0 and off <= reach:
                        d = t
                    elif not centre:
                        continue
                if d <= NEAR:
                    continue
                k = d + (eu * eu + ev * ev) / (rho * rho) * z / fx
                if k < key[py, px]:
                    key[py, px] = k
                    depth[py, px] = d
                    index[py, px] = i


def to_camera(points: np.ndarray, normals: np.ndarray, R: np.ndarray, t: np.ndarray):
    """Global points/normals into the camera frame of pose (R, t)."""
    pc = np.ascontiguousarray((points - t) @ R)
    nc = np.ascontiguousarray(normals @ R)
    return pc, nc


def splat(pc: np.ndarray, nc: np.ndarray, radius: np.ndarray, intr: CameraIntrinsics):
    """Returns (depth, index) images; depth 0 and index -1 where nothing lands."""
    H, W = intr.height, intr.width
    depth = np.zeros((H, W))
    key = np.full((H, W), np.inf)
    index = np.full((H, W), -1, dtype=np.int64)
    if len(pc):
        _splat_kernel(
            np.ascontiguousarray(pc, dtype=np.float64),
            np.ascontiguousarray(nc, dtype=np.float64),
            np.ascontiguousarray(radius, dtype=np.float64),
            float(intr.fx), float(intr.fy), float(intr.cx), float(intr.cy),
            W, H, depth, key, index,
        )
    return depth, index


def splat_reference(pc, nc, radius, intr: CameraIntrinsics):
    """Sort-based z-buffer; same candidate rule as the kernel."""
    H, W = intr.height, intr.width
    fx, fy, cx, cy = intr.fx, intr.fy, intr.cx, intr.cy
    depth_img = np.zeros((H, W))
    index_img = np.full((H, W), -1, dtype=np.int64)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    nx, ny, nz = nc[:, 0], nc[:, 1], nc[:, 2]
    ndotp = nx * x + ny * y + nz * z
    keep = (z > NEAR) & (ndotp < 0.0)
    ids = np.nonzero(keep)[0]
    if len(ids) == 0:
        return depth_img, index_img
    x, y, z, nx, ny, nz, ndotp = (a[ids] for a in (x, y, z, nx, ny, nz, ndotp))
    u = fx * x / z + cx
    v = fy * y / z + cy
    rho = np.clip(radius[ids] * fx / z, 1.0, MAX_SPLAT_PX)
    ui = np.floor(u + 0.5)
    vi = np.floor(v + 0.5)
    reach = REACH * np.maximum(radius[ids], z / fx)
    Rmax = int(math.ceil(rho.max()))
    cand_pix, cand_key, cand_depth, cand_id = [], [], [], []
    for dv in range(-Rmax, Rmax + 1):
        for du in range(-Rmax, Rmax + 1):
            px = ui + du
            py = vi + dv
            centre = du == 0 and dv == 0
            eu = px - u
            ev = py - v
            ok = (px >= 0) & (px < W) & (py >= 0) & (py < H)
            ok &= np.ceil(rho) >= max(abs(du), abs(dv))
            if not centre:
                ok &= eu * eu + ev * ev <= rho * rho
            dx = (px - cx) / fx
            dy = (py - cy) / fy
            ndotd = nx * dx + ny * dy + nz
            dlen = np.sqrt(dx * dx + dy * dy + 1.0)
            steep = np.abs(ndotd) >= GRAZING * dlen
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ndotp / ndotd
            ox = t * dx - x
            oy = t * dy - y
            oz = t - z
            off = np.sqrt(ox * ox + oy * oy + oz * oz)
            hit = steep & (t > 0.0) & (off <= reach)
            d = np.where(hit, t, z)
            if not centre:
                ok &= hit | ~steep
            ok &= d > NEAR
            k = d + (eu * eu + ev * ev) / (rho * rho) * z / fx
            cand_pix.append((py * W + px)[ok].astype(np.int64))
            cand_key.append(k[ok])
            cand_depth.append(d[ok])
            cand_id.append(ids[ok])
    pix = np.concatenate(cand_pix)
    key = np.concatenate(cand_key)
    dep = np.concatenate(cand_depth)
    sid = np.concatenate(cand_id)
    order = np.lexsort((sid, key, pix))
    pix, dep, sid = pix[order], dep[order], sid[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    depth_img.reshape(-1)[pix[first]] = dep[first]
    index_img.reshape(-1)[pix[first]] = sid[first]
    return depth_img, index_img
