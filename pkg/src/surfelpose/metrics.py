"""Pose and reconstruction accuracy: ADD-S, ADD, AUC of the ADD-S curve and
the mean surface distance of a reconstructed model."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .pose_math import RigidTransform

AUC_CAP = 0.10  # metres


@dataclass(frozen=True, eq=False)
class ObjectModel:
    name: str
    points: np.ndarray
    diameter: float | None = None
    normals: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(pts) < 4:
            raise ValueError("an object model needs at least 4 points")
        object.__setattr__(self, "points", pts)
        if self.diameter is None:
            object.__setattr__(self, "diameter", point_set_diameter(pts))
        if not self.diameter > 0:
            raise ValueError("model diameter must be positive")

    def subsample(self, max_points: int) -> "ObjectModel":
        """Deterministic evenly strided subset."""
        if len(self.points) <= max_points:
            return self
        idx = np.linspace(0, len(self.points) - 1, max_points).round().astype(int)
        nrm = None if self.normals is None else self.normals[idx]
        return ObjectModel(self.name, self.points[idx], self.diameter, nrm)

    def write_ply(self, path) -> None:
        pts = self.points
        has_n = self.normals is not None
        header = ["ply", "format ascii 1.0", f"comment diameter {self.diameter!r}",
                  f"element vertex {len(pts)}", "property float x", "property float y", "property float z"]
        if has_n:
            header += ["property float nx", "property float ny", "property float nz"]
        header.append("end_header")
        cols = np.hstack([pts, self.normals]) if has_n else pts
        fmt = " ".join(["%.9g"] * cols.shape[1])
        Path(path).write_text("\n".join(header + [fmt % tuple(r) for r in cols]) + "\n")

    @classmethod
    def read_ply(cls, path, name: str | None = None) -> "ObjectModel":
        path = Path(path)
        diameter = None
        names, count = [], 0
        with open(path) as fh:
            if fh.readline().strip() != "ply":
                raise ValueError(f"{path} is not a PLY file")
            for line in fh:
                tok = line.split()
                if not tok:
                    continue
                if tok[0] == "format" and tok[1] != "ascii":
                    raise ValueError("only ASCII PLY point models are supported")
                if tok[0] == "comment" and len(tok) == 3 and tok[1] == "diameter":
                    diameter = float(tok[2])
                elif tok[0] == "element" and tok[1] == "vertex":
                    count = int(tok[2])
                elif tok[0] == "property":
                    names.append(tok[-1])
                elif tok[0] == "end_header":
                    break
            data = np.loadtxt(fh, ndmin=2, max_rows=count)
        col = {n: i for i, n in enumerate(names)}
        pts = data[:, [col["x"], col["y"], col["z"]]]
        nrm = data[:, [col["nx"], col["ny"], col["nz"]]] if "nx" in col else None
        return cls(name or path.stem, pts, diameter, nrm)


def point_set_diameter(points: np.ndarray) -> float:
    from scipy.spatial import ConvexHull
    from scipy.spatial.distance import pdist

    pts = np.asarray(points, float)
    try:
        pts = pts[ConvexHull(pts).vertices]
    except Exception:
        pass  # degenerate (planar) sets: fall back to all points
    return float(pdist(pts).max())


def _nn_dist(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(reference).query(query, k=1)
    return d


def add_s(model: ObjectModel, est: RigidTransform, gt: RigidTransform) -> float:
    """Mean distance from each estimated model point to the closest
    ground-truth model point."""
    return float(np.mean(_nn_dist(est.apply(model.points), gt.apply(model.points))))


def add(model: ObjectModel, est: RigidTransform, gt: RigidTransform) -> float:
    """Non-symmetric variant: distance between corresponding points."""
    return float(np.mean(np.linalg.norm(est.apply(model.points) - gt.apply(model.points), axis=1)))


def auc_adds(errors, max_threshold: float = AUC_CAP) -> float:
    """Normalised area under the accuracy-vs-threshold curve on [0, cap].

    Accuracy at threshold ``th`` is the fraction of errors ``<= th``; it is a
    step function, integrated exactly between consecutive sorted errors.
    """
    e = np.sort(np.asarray(errors, dtype=float).ravel())
    if e.size == 0:
        raise ValueError("auc_adds needs at least one error")
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValueError("errors must be finite and non-negative")
    inside = e[e < max_threshold]
    edges = np.append(inside, max_threshold)
    # between edges[k] and edges[k+1] exactly k+1 errors are <= threshold
    widths = np.diff(edges)
    area = float(np.sum(widths * np.arange(1, len(inside) + 1)))
    return area / (e.size * max_threshold)


def reconstruction_error(reconstructed: ObjectModel | np.ndarray, gt: ObjectModel,
                         align: RigidTransform) -> float:
    """Mean distance from each aligned reconstructed vertex to the nearest
    ground-truth vertex."""
    pts = reconstructed.points if isinstance(reconstructed, ObjectModel) else np.asarray(reconstructed, float)
    if len(pts) == 0 or len(gt.points) == 0:
        raise ValueError("reconstruction_error needs non-empty models")
    return float(np.mean(_nn_dist(align.apply(pts), gt.points)))


@dataclass
class ObjectResult:
    name: str
    adds_mean: float
    auc: float
    recon_mu_d: float
    n_frames: int = 0
    method: str = "ekf"


@dataclass
class EvalReport:
    per_object: list[ObjectResult]

    def aggregate(self) -> dict:
        def mean(key):
            vals = [getattr(r, key) for r in self.per_object if np.isfinite(getattr(r, key))]
            return float(np.mean(vals)) if vals else float("nan")

        return {"adds_mean": mean("adds_mean"), "auc": mean("auc"), "recon_mu_d": mean("recon_mu_d")}
