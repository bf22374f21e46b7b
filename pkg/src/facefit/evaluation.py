"""Geometry accuracy: rigid ICP, radius cropping and symmetric point-to-plane error."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .morphable_model import Mesh
from .renderer import vertex_normals


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0
    residual: float = 0.0
    history: tuple[float, ...] = ()

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` applied after ``other``."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.scale * self.rotation @ other.translation + self.translation,
                              self.scale * other.scale)

    @property
    def angle_deg(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


def _points(x) -> np.ndarray:
    pts = x.vertices if isinstance(x, Mesh) else np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EvaluationError("empty point set")
    if not np.isfinite(pts).all():
        raise EvaluationError("point set contains non-finite coordinates")
    return pts


def best_fit_transform(src: np.ndarray, dst: np.ndarray, with_scale: bool = False) -> RigidTransform:
    """Closed-form least-squares rotation (+ optional isotropic scale) and translation."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    u, s, vt = np.linalg.svd(xd.T @ xs)
    d = np.array([1.0, 1.0, np.sign(np.linalg.det(u @ vt)) or 1.0])
    rot = u @ np.diag(d) @ vt
    scale = float((s * d).sum() / (xs ** 2).sum()) if with_scale and (xs ** 2).sum() > 0 else 1.0
    return RigidTransform(rot, mu_d - scale * rot @ mu_s, scale)


def icp_align(source, target, max_iters: int = 100, tol: float = 1e-12, with_scale: bool = False,
              init: RigidTransform | None = None) -> RigidTransform:
    """Point-to-point ICP over vertices; returns the transform mapping source onto target.

    ``residual`` is the RMS nearest-neighbour distance after the last update
    and ``history`` records it per iteration (starting with the initial pose).
    """
    src, dst = _points(source), _points(target)
    tree = cKDTree(dst)
    current = init or RigidTransform.identity()
    moved = current.apply(src)
    dist, idx = tree.query(moved)
    history = [float(np.sqrt(np.mean(dist ** 2)))]
    for _ in range(max_iters):
        step = best_fit_transform(src, dst[idx], with_scale)
        current = RigidTransform(step.rotation, step.translation, step.scale)
        moved = current.apply(src)
        dist, idx = tree.query(moved)
        res = float(np.sqrt(np.mean(dist ** 2)))
        if not np.isfinite(res):
            raise EvaluationError("ICP residual became non-finite")
        history.append(res)
        if abs(history[-2] - res) < tol:
            break
    return RigidTransform(current.rotation, current.translation, current.scale, history[-1], tuple(history))


def crop_radius(mesh: Mesh, center_vertex: int, radius_mm: float) -> Mesh:
    """Keep vertices strictly closer than ``radius_mm`` to the centre vertex and the faces they span."""
    center = mesh.vertices[center_vertex]
    keep = np.linalg.norm(mesh.vertices - center, axis=1) < radius_mm
    if not keep.any():
        raise EvaluationError("crop removed every vertex")
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    tris = mesh.triangles[keep[mesh.triangles].all(axis=1)]
    lms = mesh.landmark_indices
    lms = remap[lms[keep[lms]]] if lms.size else lms
    uv = mesh.uv[keep] if mesh.uv is not None else None
    return Mesh(mesh.vertices[keep], remap[tris], uv, lms)


def mesh_normals(mesh: Mesh) -> np.ndarray:
    return vertex_normals(mesh.vertices, mesh.triangles).data


@dataclass
class PointToPlaneResult:
    distance: float
    a_to_b: float
    b_to_a: float
    fallbacks: int = 0
    per_vertex: tuple[np.ndarray, np.ndarray] = field(default=None, repr=False)

    def __float__(self) -> float:
        return self.distance


def _one_way(a: np.ndarray, b: np.ndarray, normals_b: np.ndarray) -> tuple[np.ndarray, int]:
    _, idx = cKDTree(b).query(a)
    diff = a - b[idx]
    n = normals_b[idx]
    degenerate = np.linalg.norm(n, axis=1) == 0
    d = np.abs((n * diff).sum(axis=1))
    d[degenerate] = np.linalg.norm(diff[degenerate], axis=1)
    return d, int(degenerate.sum())


def point_to_plane_details(a: Mesh, b: Mesh) -> PointToPlaneResult:
    da, fa = _one_way(a.vertices, b.vertices, mesh_normals(b))
    db, fb = _one_way(b.vertices, a.vertices, mesh_normals(a))
    ab, ba = float(da.mean()), float(db.mean())
    return PointToPlaneResult(0.5 * (ab + ba), ab, ba, fa + fb, (da, db))


def point_to_plane(a: Mesh, b: Mesh) -> float:
    """Average of the two one-way mean point-to-plane distances."""
    return point_to_plane_details(a, b).distance


@dataclass
class EvalRow:
    residual: float
    distance: float
    n_pred: int
    n_gt: int
    fallbacks: int


def evaluate_pair(pred: Mesh, gt: Mesh, center_vertex: int, radius: float = 95.0, with_scale: bool = False,
                  max_iters: int = 100) -> EvalRow:
    """ICP-align ``pred`` to ``gt``, crop both around the centre vertex, measure point-to-plane."""
    transform = icp_align(pred, gt, max_iters=max_iters, with_scale=with_scale)
    aligned = pred.with_vertices(transform.apply(pred.vertices))
    a = crop_radius(aligned, center_vertex, radius)
    b = crop_radius(gt, center_vertex, radius)
    res = point_to_plane_details(a, b)
    return EvalRow(transform.residual, res.distance, a.n_vertices, b.n_vertices, res.fallbacks)
