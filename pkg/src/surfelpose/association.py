"""Detections, mask-to-instance association and label refinement.

Also holds the synthetic detector used in place of a trained instance
segmentation network: it erodes ground-truth masks and assigns the eroded
boundary soft values just under 0.5, so boundary pixels are lost after
binarisation the way weak network outputs are.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .surfel_map import NO_INSTANCE, RenderedView, SurfelMap, predicted_instance_mask

OVERLAP_THRESHOLD = 0.3
BAND = (0.4, 0.5)
SOFT_CODE_MAX = 65535


@dataclass(eq=False)
class InstanceMask:
    binary: np.ndarray  # (H, W) bool
    soft: np.ndarray  # (H, W) float in [0, 1]
    class_label: str
    score: float = 1.0
    class_probs: np.ndarray | None = None  # full distribution over the class set

    def __post_init__(self):
        self.soft = np.asarray(self.soft, dtype=float)
        self.binary = np.asarray(self.binary, dtype=bool)
        if self.binary.shape != self.soft.shape:
            raise ValueError("binary and soft masks differ in shape")
        if np.any(self.soft < 0) or np.any(self.soft > 1):
            raise ValueError("soft mask values outside [0, 1]")
        if not np.array_equal(self.binary, self.soft > 0.5):
            raise ValueError("binary mask must equal soft > 0.5")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score outside [0, 1]")

    @classmethod
    def from_soft(cls, soft, class_label: str, score: float = 1.0, class_probs=None) -> "InstanceMask":
        soft = np.asarray(soft, dtype=float)
        return cls(soft > 0.5, soft, class_label, score, class_probs)

    def distribution(self, classes: Sequence[str]) -> np.ndarray:
        if self.class_probs is not None:
            d = np.asarray(self.class_probs, float)
            if d.shape != (len(classes),):
                raise ValueError("class distribution length does not match the class set")
            return d
        if self.class_label not in classes:
            raise ValueError(f"unknown class label {self.class_label!r}")
        d = np.zeros(len(classes))
        d[list(classes).index(self.class_label)] = 1.0
        return d


@dataclass(eq=False)
class Detection:
    masks: list[InstanceMask]
    frame_index: int = 0

    def __post_init__(self):
        # contested pixels go to the higher score; the loser's soft value is
        # capped at 0.5 there so binary == soft > 0.5 keeps holding
        order = sorted(range(len(self.masks)), key=lambda k: -self.masks[k].score)
        taken = None
        for k in order:
            mk = self.masks[k]
            if taken is None:
                taken = np.zeros_like(mk.binary)
            lost = mk.binary & taken
            if np.any(lost):
                soft = mk.soft.copy()
                soft[lost] = 0.5
                self.masks[k] = InstanceMask(mk.binary & ~taken, soft, mk.class_label, mk.score, mk.class_probs)
            taken |= self.masks[k].binary

    def pixel_p_o(self, shape) -> np.ndarray:
        """Per-pixel non-background probability: max soft value over masks."""
        out = np.zeros(shape)
        for mk in self.masks:
            np.maximum(out, mk.soft, out=out)
        return out


def overlap(M: np.ndarray, M_hat: np.ndarray) -> float:
    """|M and M_hat| / |M_hat|, 0 for an empty M_hat."""
    if M.shape != M_hat.shape:
        raise ValueError(f"mask shapes differ: {M.shape} vs {M_hat.shape}")
    denom = int(np.count_nonzero(M_hat))
    if denom == 0:
        return 0.0
    return np.count_nonzero(M & M_hat) / denom


@dataclass(frozen=True)
class Assignment:
    mask_index: int
    instance: int | None  # None = start a new instance
    overlap: float = 0.0


def associate(det: Detection, view: RenderedView, instances: Iterable[int],
              threshold: float = OVERLAP_THRESHOLD) -> list[Assignment]:
    """Match each mask to the existing instance of largest overlap above
    ``threshold`` (strict). Each instance takes at most one mask; conflicts
    go to the larger overlap, then the lower instance id."""
    present = set(np.unique(view.instance_map).tolist()) - {NO_INSTANCE}
    cands = []
    for iid in sorted(set(instances) & present):
        M_hat = predicted_instance_mask(view, iid)
        for k, mk in enumerate(det.masks):
            u = overlap(mk.binary, M_hat)
            if u > threshold:
                cands.append((-u, iid, k))
    cands.sort()
    out: dict[int, Assignment] = {}
    used: set[int] = set()
    for neg_u, iid, k in cands:
        if k in out or iid in used:
            continue
        out[k] = Assignment(k, iid, -neg_u)
        used.add(iid)
    return [out.get(k, Assignment(k, None, 0.0)) for k in range(len(det.masks))]


# -- segmentation refinement ------------------------------------------------------


@dataclass
class RefineParams:
    n: int = 10  # frames between assignment checks
    sigma_object: int = 10
    band: tuple[float, float] = BAND
    pixel_threshold: float = 0.4
    voxel: float = 0.01
    assign_radius: float = 0.03

    def __post_init__(self):
        self.band = tuple(self.band)
        lo, hi = self.band
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError("band must satisfy 0 <= lo < hi <= 1")
        if self.n < 1 or self.sigma_object < 0:
            raise ValueError("n must be >= 1 and sigma_object >= 0")
        if not (self.voxel > 0 and self.assign_radius > 0):
            raise ValueError("voxel and assign_radius must be positive")


_OFFSETS = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


def _voxel_keys(cells: np.ndarray) -> np.ndarray:
    c = cells.astype(np.int64) + (1 << 20)
    return (c[..., 0] << 42) | (c[..., 1] << 21) | c[..., 2]


@dataclass
class RefineStats:
    candidates: int = 0
    incremented: int = 0
    reset: int = 0
    assigned: int = 0
    checked: bool = False


def refine_step(m: SurfelMap, view: RenderedView, frame_p_o: np.ndarray, frame_index: int,
                params: RefineParams | None = None) -> RefineStats:
    """One update of the per-surfel refinement counters.

    Candidates are visible, unlabelled surfels with p_o strictly inside the
    band. A candidate's counter grows when the frame's p_o at its pixel
    exceeds ``pixel_threshold`` and a labelled surfel occupies its voxel or
    one of the six face-adjacent voxels; otherwise it drops to 0. Surfels
    outside the band are reset. Every ``n`` frames, surfels whose counter
    exceeds ``sigma_object`` join the instance of the nearest labelled
    surfel within ``assign_radius``, and their counters restart.
    """
    p = params or RefineParams()
    if frame_p_o.shape != view.depth.shape:
        raise ValueError("frame p_o map does not match the view")
    stats = RefineStats()
    lo, hi = p.band
    in_band = (m.p_o > lo) & (m.p_o < hi) & (m.instance_id == NO_INSTANCE)
    m.refine_confidence[~in_band] = 0

    idx = view.surfel_index_map
    pv, pu = np.nonzero(idx >= 0)
    sid = idx[pv, pu]
    sel = in_band[sid]
    pv, pu, sid = pv[sel], pu[sel], sid[sel]
    if len(sid):
        # one pixel per surfel: the lowest flat index it wins
        _, first = np.unique(sid, return_index=True)
        pv, pu, sid = pv[first], pu[first], sid[first]
        stats.candidates = len(sid)
        crit_i = frame_p_o[pv, pu] > p.pixel_threshold
        labelled = m.instance_id != NO_INSTANCE
        if np.any(labelled):
            occ = np.unique(_voxel_keys(np.floor(m.position[labelled] / p.voxel)))
            cells = np.floor(m.position[sid] / p.voxel)[:, None, :] + _OFFSETS[None]
            crit_ii = np.isin(_voxel_keys(cells), occ).any(axis=1)
        else:
            crit_ii = np.zeros(len(sid), bool)
        ok = crit_i & crit_ii
        m.refine_confidence[sid[ok]] += 1
        m.refine_confidence[sid[~ok]] = 0
        stats.incremented = int(ok.sum())
        stats.reset = int((~ok).sum())

    if m.refine_last_check is None:
        m.refine_last_check = frame_index
    if frame_index - m.refine_last_check >= p.n:
        m.refine_last_check = frame_index
        stats.checked = True
        ready = np.nonzero(m.refine_confidence > p.sigma_object)[0]
        labelled = np.nonzero(m.instance_id != NO_INSTANCE)[0]
        if len(ready) and len(labelled):
            dist, nn = cKDTree(m.position[labelled]).query(m.position[ready], k=1)
            near = dist <= p.assign_radius
            m.instance_id[ready[near]] = m.instance_id[labelled[nn[near]]]
            stats.assigned = int(near.sum())
        m.refine_confidence[ready] = 0
    return stats


# -- synthetic detector --------------------------------------------------------------


@dataclass
class DetectorCorruption:
    erode_px: int = 0
    class_flip_prob: float = 0.0
    score_range: tuple[float, float] = (0.8, 1.0)
    min_pixels: int = 1

    def __post_init__(self):
        self.score_range = tuple(self.score_range)
        if self.erode_px < 0:
            raise ValueError("erode_px must be >= 0")
        if not 0.0 <= self.class_flip_prob <= 1.0:
            raise ValueError("class_flip_prob outside [0, 1]")


def _codes(rng, lo: float, hi: float, n: int, include_hi: bool) -> np.ndarray:
    """Soft values k / 65535 drawn uniformly from [lo, hi) or [lo, hi]."""
    a = int(np.ceil(lo * SOFT_CODE_MAX))
    b = int(np.floor(hi * SOFT_CODE_MAX)) if include_hi else int(np.ceil(hi * SOFT_CODE_MAX)) - 1
    return rng.integers(a, b, size=n, endpoint=True) / SOFT_CODE_MAX


def synthetic_detect(gt_masks: np.ndarray, gt_classes: dict[int, str], classes: Sequence[str],
                     corruption: DetectorCorruption | None = None, rng_seed=0,
                     frame_index: int = 0) -> Detection:
    """Corrupted copy of the ground-truth segmentation.

    Per object: pixels at least ``erode_px`` inside the silhouette get soft
    values in [0.7, 1.0], the eroded rim gets [0.40, 0.50) and everything
    else [0, 0.2]. The label flips to a random other class with
    ``class_flip_prob``. Soft values are multiples of 1/65535 so they survive
    the 16-bit disk format exactly.
    """
    c = corruption or DetectorCorruption()
    rng = np.random.default_rng(rng_seed)
    classes = list(classes)
    masks = []
    structure = np.ones((3, 3), bool)
    for iid in sorted(int(k) for k in np.unique(gt_masks) if k != 0):
        true = gt_masks == iid
        if true.sum() < c.min_pixels:
            continue
        core = ndimage.binary_erosion(true, structure, iterations=c.erode_px) if c.erode_px else true
        rim = true & ~core
        soft = _codes(rng, 0.0, 0.2, true.size, True).reshape(true.shape)
        soft[core] = _codes(rng, 0.7, 1.0, int(core.sum()), True)
        soft[rim] = _codes(rng, 0.4, 0.5, int(rim.sum()), False)
        label = gt_classes[iid]
        if c.class_flip_prob > 0 and rng.random() < c.class_flip_prob:
            others = [k for k in classes if k != label]
            label = others[int(rng.integers(len(others)))]
        score = float(rng.uniform(*c.score_range))
        probs = np.full(len(classes), (1.0 - score) / max(len(classes) - 1, 1))
        probs[classes.index(label)] = score if len(classes) > 1 else 1.0
        if not core.any():
            continue
        masks.append(InstanceMask(core, soft, label, score, probs))
    return Detection(masks, frame_index)


# -- disk format -----------------------------------------------------------------------


def write_detection(det: Detection, out_dir) -> Path:
    from .dataset import write_pnm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, mk in enumerate(det.masks):
        name = f"mask_{k:02d}.pgm"
        write_pnm(out / name, np.rint(mk.soft * SOFT_CODE_MAX).astype(np.uint16), SOFT_CODE_MAX)
        e = {"file": name, "class": mk.class_label, "score": mk.score}
        if mk.class_probs is not None:
            e["class_probs"] = [float(x) for x in mk.class_probs]
        entries.append(e)
    path = out / "manifest.json"
    path.write_text(json.dumps({"frame": det.frame_index, "masks": entries}, indent=1, sort_keys=True))
    return path


def read_detection(in_dir) -> Detection:
    from .dataset import read_pnm

    d = Path(in_dir)
    meta = json.loads((d / "manifest.json").read_text())
    masks = []
    for e in meta["masks"]:
        img, maxval = read_pnm(d / e["file"])
        masks.append(InstanceMask.from_soft(img / maxval, e["class"], float(e.get("score", 1.0)),
                                            e.get("class_probs")))
    return Detection(masks, int(meta["frame"]))
