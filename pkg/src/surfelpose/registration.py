"""Frame-to-model camera tracking.

The camera-to-global pose ``T`` is refined by Gauss-Newton on

    E(T) = E_icp(T) + omega * E_rgb(T)

where ``E_icp`` is the mean squared point-to-plane distance between the
frame's vertices and the rendered model, and ``E_rgb`` the mean squared
difference between the model intensity and the frame intensity sampled at
the reprojected model vertex. Increments ``xi = (dt, dr)`` act on the left:
``T <- (Exp(dr), dt) o T``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from .camera import RgbdFrame, _shift, backproject, bilinear, rgb_to_intensity
from .pose_math import RigidTransform, orthonormalize, rotvec_to_matrix
from .surfel_map import RenderedView

MIN_CORRESPONDENCES = 6
MAX_HALVINGS = 8
WARM_START_STRIDE = 2


class RegistrationError(RuntimeError):
    def __init__(self, msg: str, n_icp: int = 0, n_rgb: int = 0):
        super().__init__(f"{msg} (icp pairs={n_icp}, rgb pairs={n_rgb})")
        self.n_icp = n_icp
        self.n_rgb = n_rgb


@dataclass
class RegistrationParams:
    omega: float = 0.1
    max_iterations: int = 15
    depth_gate_m: float = 0.1
    normal_gate_deg: float = 30.0
    pyramid_levels: int = 1
    geometric_warm_start: bool = True

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError("omega must be non-negative")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.depth_gate_m > 0:
            raise ValueError("depth_gate_m must be positive")
        if not 0 < self.normal_gate_deg <= 180:
            raise ValueError("normal_gate_deg must be in (0, 180]")
        if not 1 <= self.pyramid_levels <= 4:
            raise ValueError("pyramid_levels must be in 1..4")

    @classmethod
    def from_json(cls, d: dict) -> "RegistrationParams":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown registration keys: {sorted(extra)}")
        return cls(**d)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class RegistrationResult:
    pose: RigidTransform
    final_cost: float
    icp_cost: float
    rgb_cost: float
    iterations: int
    converged: bool
    increment_norms: list[float]
    costs: list[float]  # accepted costs, starting with the cost at init


@dataclass
class Residuals:
    r: np.ndarray  # (N,)
    J: np.ndarray  # (N, 6) d r / d (dt, dr)
    frame_px: np.ndarray  # (N,) flat frame pixel index
    model_px: np.ndarray  # (N,) flat model pixel index


def increment(pose: RigidTransform, xi) -> RigidTransform:
    """Left-multiplied increment: (Exp(dr), dt) o pose."""
    xi = np.asarray(xi, float)
    dR = rotvec_to_matrix(xi[3:])
    return RigidTransform(orthonormalize(dR @ pose.rotation), dR @ pose.translation + xi[:3])


@dataclass
class _FrameData:
    frame: RgbdFrame
    Vc: np.ndarray  # (H, W, 3) camera-frame vertices
    Nc: np.ndarray  # (H, W, 3) camera-frame normals
    nok: np.ndarray  # (H, W) normal reliable
    valid: np.ndarray

    @classmethod
    def build(cls, frame: RgbdFrame) -> "_FrameData":
        valid = frame.valid
        depth = np.where(valid, frame.depth, 0.0)
        Nc, nok = frame.normals()
        return cls(frame, backproject(depth, frame.intr), Nc, nok, valid)


def _model_intensity(view: RenderedView) -> np.ndarray:
    return rgb_to_intensity(view.color)


def smooth_model_pixels(view: RenderedView, rel_jump: float = 0.02,
                        normal_cos: float = math.cos(math.radians(30.0))) -> np.ndarray:
    """Rendered pixels whose 4-neighbours lie on the same smooth surface:
    no silhouette (depth jump above ``rel_jump`` of the depth) and no crease."""
    ok = view.surfel_index_map >= 0
    D, N = view.depth, view.normal
    out = ok.copy()
    for dv, du in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        out &= _shift(ok, dv, du, False)
        out &= np.abs(_shift(D, dv, du) - D) < rel_jump * D
        out &= np.sum(_shift(N, dv, du) * N, axis=-1) > normal_cos
    return out


@dataclass
class _ModelData:
    """Per-view quantities that stay fixed while the pose is optimised."""

    view: RenderedView
    smooth: np.ndarray  # (H, W) pixels inside smooth patches
    V: np.ndarray  # (H, W, 3) global vertices
    intensity: np.ndarray
    _tree: cKDTree | None = field(default=None, repr=False)

    @classmethod
    def build(cls, view: RenderedView) -> "_ModelData":
        return cls(view, smooth_model_pixels(view), view.vertices(), _model_intensity(view))

    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.V[self.smooth])
        return self._tree


def _model(predicted) -> _ModelData:
    return predicted if isinstance(predicted, _ModelData) else _ModelData.build(predicted)


def icp_residuals(frame: RgbdFrame | _FrameData, predicted: RenderedView | _ModelData, pose: RigidTransform,
                  depth_gate: float = 0.1, normal_gate_deg: float = 30.0) -> Residuals:
    """Point-to-plane residuals ``(T v_frame - v_model) . n_model``.

    Frame vertices are moved to the global frame with ``pose`` and projected
    into the predicted view; the model vertex at the nearest pixel is the
    partner. Pairs whose depth differs by ``depth_gate`` or more, or whose
    normals disagree by ``normal_gate_deg`` or more, are dropped.
    """
    fd = frame if isinstance(frame, _FrameData) else _FrameData.build(frame)
    md = _model(predicted)
    predicted = md.view
    intr = predicted.intr
    H, W = intr.shape
    ok = fd.valid & fd.nok
    pv, pu = np.nonzero(ok)
    vg = pose.apply(fd.Vc[pv, pu])
    ng = pose.rotate(fd.Nc[pv, pu])
    P = predicted.pose
    pc = (vg - P.translation) @ P.rotation
    z = pc[:, 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    mu = np.floor(intr.fx * pc[:, 0] / zs + intr.cx + 0.5)
    mv = np.floor(intr.fy * pc[:, 1] / zs + intr.cy + 0.5)
    inside = front & (mu >= 0) & (mu < W) & (mv >= 0) & (mv < H)
    mu = np.where(inside, mu, 0).astype(np.intp)
    mv = np.where(inside, mv, 0).astype(np.intp)
    mdepth = predicted.depth[mv, mu]
    keep = inside & md.smooth[mv, mu]
    keep &= np.abs(z - mdepth) < depth_gate
    nm = predicted.normal[mv, mu]
    keep &= np.sum(ng * nm, axis=1) > math.cos(math.radians(normal_gate_deg))
    vm = md.V[mv[keep], mu[keep]]
    nm = nm[keep]
    vg = vg[keep]
    r = np.sum((vg - vm) * nm, axis=1)
    J = np.hstack([nm, np.cross(vg, nm)])
    return Residuals(r, J, (pv * fd.frame.intr.width + pu)[keep], (mv * W + mu)[keep])


def rgb_residuals(frame: RgbdFrame | _FrameData, predicted: RenderedView | _ModelData, pose: RigidTransform,
                  depth_gate: float | None = 0.1) -> Residuals:
    """Photometric residuals ``I_frame(warp(x)) - I_model(x)`` over model pixels.

    Each rendered model vertex is reprojected into the frame under ``pose``
    and the frame intensity sampled bilinearly. Samples falling outside the
    frame are dropped. With ``depth_gate`` set, only model pixels inside a
    smooth surface patch are used, and a sample is kept only if all four
    frame pixels of its bilinear cell are valid with depth within
    ``depth_gate`` of the vertex (i.e. visible in the frame).
    """
    fd = frame if isinstance(frame, _FrameData) else _FrameData.build(frame)
    f = fd.frame
    intr = f.intr
    H, W = intr.shape
    md = _model(predicted)
    predicted = md.view
    src = predicted.surfel_index_map >= 0 if depth_gate is None else md.smooth
    mv, mu = np.nonzero(src)
    Wm = predicted.intr.width
    V = md.V[mv, mu]
    Im = md.intensity[mv, mu]
    R, t = pose.rotation, pose.translation
    xc = (V - t) @ R
    z = xc[:, 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    u = intr.fx * xc[:, 0] / zs + intr.cx
    v = intr.fy * xc[:, 1] / zs + intr.cy
    keep = front & (u >= 0) & (u < W - 1) & (v >= 0) & (v < H - 1)
    if depth_gate is not None:
        u0 = np.clip(np.floor(u), 0, W - 2).astype(np.intp)
        v0 = np.clip(np.floor(v), 0, H - 2).astype(np.intp)
        for dv, du in ((0, 0), (0, 1), (1, 0), (1, 1)):
            keep &= fd.valid[v0 + dv, u0 + du] & (np.abs(f.depth[v0 + dv, u0 + du] - z) < depth_gate)
    u, v, xc, V, z = u[keep], v[keep], xc[keep], V[keep], z[keep]
    val, gu, gv = bilinear(f.intensity, u, v)
    r = val - Im[keep]
    # d(u, v)/d x_c
    du = np.stack([intr.fx / z, np.zeros_like(z), -intr.fx * xc[:, 0] / z ** 2], axis=1)
    dv = np.stack([np.zeros_like(z), intr.fy / z, -intr.fy * xc[:, 1] / z ** 2], axis=1)
    g = gu[:, None] * du + gv[:, None] * dv  # (N, 3) dI/dx_c
    # x_c = R^T (V - t): d/d dt = -R^T, d/d dr = R^T [V]x
    gR = g @ R.T  # rows g^T R^T
    J_t = -gR
    J_r = np.cross(gR, V)  # (R g)^T [V]x = ((R g) x V)^T
    J = np.hstack([J_t, J_r])
    fpx = (np.floor(v + 0.5) * W + np.floor(u + 0.5)).astype(np.int64)
    return Residuals(r, J, fpx, (mv * Wm + mu)[keep])


def closest_point_residuals(frame: RgbdFrame | _FrameData, predicted: RenderedView | _ModelData,
                            pose: RigidTransform, depth_gate: float = 0.1,
                            normal_gate_deg: float = 30.0, stride: int = 1) -> Residuals:
    """Point-to-plane residuals against the nearest model vertex in 3D.

    Same residual and Jacobian as :func:`icp_residuals`, but each frame vertex
    is paired with the closest smooth-patch model vertex within ``depth_gate``
    metres instead of the one at its projected pixel. Slower, with a much
    wider basin when the initial pose is several degrees off. ``stride``
    keeps only frame pixels on a regular grid of that spacing.
    """
    fd = frame if isinstance(frame, _FrameData) else _FrameData.build(frame)
    md = _model(predicted)
    ok = fd.valid & fd.nok
    if stride > 1:
        grid = np.zeros_like(ok)
        grid[::stride, ::stride] = True
        ok &= grid
    pv, pu = np.nonzero(ok)
    vg = pose.apply(fd.Vc[pv, pu])
    ng = pose.rotate(fd.Nc[pv, pu])
    mv, mu = np.nonzero(md.smooth)
    if len(mv) == 0:
        return Residuals(np.zeros(0), np.zeros((0, 6)), np.zeros(0, np.intp), np.zeros(0, np.intp))
    d, j = md.tree().query(vg, distance_upper_bound=depth_gate)
    keep = np.isfinite(d)
    j = np.where(keep, j, 0)
    nm = md.view.normal[mv[j], mu[j]]
    keep &= np.sum(ng * nm, axis=1) > math.cos(math.radians(normal_gate_deg))
    vm = md.V[mv[j[keep]], mu[j[keep]]]
    nm, vg = nm[keep], vg[keep]
    r = np.sum((vg - vm) * nm, axis=1)
    J = np.hstack([nm, np.cross(vg, nm)])
    W = md.view.intr.width
    return Residuals(r, J, (pv * fd.frame.intr.width + pu)[keep], (mv[j[keep]] * W + mu[j[keep]]))


def _warm_start(fd: _FrameData, md: _ModelData, init: RigidTransform, p: RegistrationParams):
    """Geometric-only Gauss-Newton with closest-point pairs."""
    pose = init
    res = closest_point_residuals(fd, md, pose, p.depth_gate_m, p.normal_gate_deg, WARM_START_STRIDE)
    if len(res.r) < MIN_CORRESPONDENCES:
        return pose, 0
    E = float(np.mean(res.r ** 2))
    it = 0
    for it in range(1, p.max_iterations + 1):
        xi = _solve(res, None, 0.0)
        for _ in range(MAX_HALVINGS + 1):
            cand = increment(pose, xi)
            cres = closest_point_residuals(fd, md, cand, p.depth_gate_m, p.normal_gate_deg, WARM_START_STRIDE)
            Ec = float(np.mean(cres.r ** 2)) if len(cres.r) >= MIN_CORRESPONDENCES else math.inf
            if Ec <= E:
                break
            xi = xi / 2.0
        else:
            break
        rel = (E - Ec) / E if E > 0 else 0.0
        pose, res, E = cand, cres, Ec
        if np.linalg.norm(xi) < 1e-6 or rel < 1e-7:
            break
    return pose, it


def _cost(fd, view, pose, p: RegistrationParams):
    icp = icp_residuals(fd, view, pose, p.depth_gate_m, p.normal_gate_deg)
    rgb = rgb_residuals(fd, view, pose, p.depth_gate_m) if p.omega > 0 else None
    e_icp = float(np.mean(icp.r ** 2)) if len(icp.r) else 0.0
    e_rgb = float(np.mean(rgb.r ** 2)) if rgb is not None and len(rgb.r) else 0.0
    return e_icp, e_rgb, icp, rgb


def _solve(icp: Residuals, rgb: Residuals | None, omega: float) -> np.ndarray:
    H = np.zeros((6, 6))
    g = np.zeros(6)
    if len(icp.r):
        H += icp.J.T @ icp.J / len(icp.r)
        g += icp.J.T @ icp.r / len(icp.r)
    if rgb is not None and len(rgb.r) and omega > 0:
        H += omega * rgb.J.T @ rgb.J / len(rgb.r)
        g += omega * rgb.J.T @ rgb.r / len(rgb.r)
    damp = 1e-9 * max(float(np.max(np.diag(H))), 1e-12)
    return -np.linalg.solve(H + damp * np.eye(6), g)


def _check_init(fd, view, pose, p: RegistrationParams) -> None:
    icp = icp_residuals(fd, view, pose, p.depth_gate_m, p.normal_gate_deg)
    if len(icp.r) < MIN_CORRESPONDENCES:
        raise RegistrationError("too few correspondences at the initial pose", len(icp.r))


def _optimise(fd: _FrameData, view: RenderedView, init: RigidTransform, p: RegistrationParams,
              check_init: bool):
    pose = init
    e_icp, e_rgb, icp, rgb = _cost(fd, view, pose, p)
    n_rgb = 0 if rgb is None else len(rgb.r)
    if check_init and len(icp.r) < MIN_CORRESPONDENCES:
        raise RegistrationError("too few correspondences at the initial pose", len(icp.r), n_rgb)
    E = e_icp + p.omega * e_rgb
    costs, steps = [E], []
    converged = False
    it = 0
    for it in range(1, p.max_iterations + 1):
        if len(icp.r) < MIN_CORRESPONDENCES:
            break
        xi = _solve(icp, rgb, p.omega)
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            cand = increment(pose, xi)
            c_icp, c_rgb, c_icpr, c_rgbr = _cost(fd, view, cand, p)
            Ec = c_icp + p.omega * c_rgb
            if Ec <= E and len(c_icpr.r) >= MIN_CORRESPONDENCES:
                accepted = True
                break
            xi = xi / 2.0
        step = float(np.linalg.norm(xi))
        steps.append(step if accepted else 0.0)
        if not accepted:
            converged = step < 1e-6
            break
        rel = (E - Ec) / E if E > 0 else 0.0
        pose, E, e_icp, e_rgb, icp, rgb = cand, Ec, c_icp, c_rgb, c_icpr, c_rgbr
        costs.append(E)
        if step < 1e-6 or rel < 1e-7:
            converged = True
            break
    return pose, e_icp, e_rgb, it, converged, steps, costs


def estimate_pose(frame: RgbdFrame, predicted: RenderedView, init: RigidTransform,
                  params: RegistrationParams | None = None) -> RegistrationResult:
    """Camera-to-global pose of ``frame`` against a view rendered from the map.

    With ``geometric_warm_start`` the geometric term is first minimised from
    ``init`` using closest-point pairs; if that pose has a lower joint cost
    than ``init`` the joint objective with projective pairs is minimised from
    there, otherwise from ``init``. ``costs`` and ``increment_norms``
    describe the joint stage only.

    Raises :class:`RegistrationError` if fewer than 6 geometric pairs exist
    at ``init``.
    """
    p = params or RegistrationParams()
    pose = init
    steps_all: list[float] = []
    costs_all: list[float] = []
    iters = 0
    converged = False
    e_icp = e_rgb = 0.0
    for level in reversed(range(p.pyramid_levels)):
        f = 2 ** level
        if f == 1:
            fr, view = frame, predicted
        else:
            intr = frame.intr.scaled(f)
            s = (slice(None, None, f), slice(None, None, f))
            fr = RgbdFrame(frame.depth[s], frame.color[s], intr, frame.index, frame.intensity[s])
            view = predicted.downsample(f)
        fd = _FrameData.build(fr)
        view = _ModelData.build(view)
        first = level == p.pyramid_levels - 1
        if first and p.geometric_warm_start:
            _check_init(fd, view, pose, p)
            # projective pairs and the photometric term both have narrow basins;
            # the closest-point result is kept only if it lowers the objective
            warm, it = _warm_start(fd, view, pose, p)
            iters += it
            e0, e1 = _cost(fd, view, pose, p), _cost(fd, view, warm, p)
            if (e1[0] + p.omega * e1[1] < e0[0] + p.omega * e0[1]
                    and len(e1[2].r) >= MIN_CORRESPONDENCES):
                pose = warm
        pose, e_icp, e_rgb, it, converged, steps, costs = _optimise(fd, view, pose, p, check_init=first)
        iters += it
        steps_all += steps
        costs_all += costs
    return RegistrationResult(pose, e_icp + p.omega * e_rgb, e_icp, e_rgb, iters, converged, steps_all, costs_all)
