"""Linear shape/expression/texture models, the template mesh and UV sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray

N_LANDMARKS = 68


@dataclass(frozen=True)
class LinearModel:
    """``x = mean + basis @ p``; ``stdev`` holds the per-component scale."""

    mean: np.ndarray
    basis: np.ndarray
    stdev: np.ndarray
    n_samples: int = 0

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float64).reshape(-1)
        basis = np.ascontiguousarray(self.basis, dtype=np.float64)
        stdev = np.ascontiguousarray(self.stdev, dtype=np.float64).reshape(-1)
        if basis.ndim != 2 or basis.shape[0] != mean.size:
            raise ValueError(f"basis shape {basis.shape} does not match mean length {mean.size}")
        if stdev.size != basis.shape[1]:
            raise ValueError(f"{stdev.size} stdevs for {basis.shape[1]} components")
        norms = np.linalg.norm(basis, axis=0)
        if basis.shape[1] and not np.allclose(norms, 1.0, atol=1e-8):
            raise ValueError("basis columns must be unit-norm")
        n_samples = self.n_samples or basis.shape[1]
        if basis.shape[1] > n_samples:
            raise ValueError("more components than training samples")
        for name, arr in (("mean", mean), ("basis", basis), ("stdev", stdev)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "n_samples", int(n_samples))

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def from_samples(cls, samples: np.ndarray, n_components: int) -> "LinearModel":
        """PCA over the rows of ``samples``."""
        samples = np.asarray(samples, dtype=np.float64)
        if n_components > samples.shape[0]:
            raise ValueError("n_components exceeds the number of samples")
        mean = samples.mean(axis=0)
        _, s, vt = np.linalg.svd(samples - mean, full_matrices=False)
        stdev = s[:n_components] / np.sqrt(max(samples.shape[0] - 1, 1))
        return cls(mean, vt[:n_components].T, stdev, n_samples=samples.shape[0])

    def project(self, target: np.ndarray) -> np.ndarray:
        """Least-squares coefficients of ``target - mean`` in the basis."""
        q, *_ = np.linalg.lstsq(self.basis, np.asarray(target, dtype=np.float64).reshape(-1) - self.mean,
                                rcond=None)
        return q


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    uv: np.ndarray | None = None
    landmark_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        lm = np.ascontiguousarray(self.landmark_indices, dtype=np.int64).reshape(-1)
        n = v.shape[0]
        if t.size and (t.min() < 0 or t.max() >= n):
            raise ValueError("triangle index out of range")
        if lm.size and (lm.min() < 0 or lm.max() >= n):
            raise ValueError("landmark index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "landmark_indices", lm)
        if self.uv is not None:
            uv = np.ascontiguousarray(self.uv, dtype=np.float64).reshape(-1, 2)
            if uv.shape[0] != n:
                raise ValueError("uv must have one row per vertex")
            if uv.size and (uv.min() < 0.0 or uv.max() > 1.0):
                raise ValueError("uv coordinates must lie in [0, 1]")
            object.__setattr__(self, "uv", uv)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.triangles, self.uv, self.landmark_indices)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def diameter(self) -> float:
        v = self.vertices
        d2 = ((v[:, None, :] - v[None, :, :]) ** 2).sum(-1)
        return float(np.sqrt(d2.max()))


@dataclass(frozen=True)
class FaceModel:
    """Everything the renderer needs that does not change during a fit."""

    shape: LinearModel
    expression: LinearModel
    texture: LinearModel
    mesh: Mesh
    uv_size: tuple[int, int, int]

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices


# ---------------------------------------------------------------------------
# operations

def _check_len(p, n: int, what: str) -> DiffArray:
    p = ad.const(p)
    if p.ndim != 1 or p.shape[0] != n:
        raise ValueError(f"{what}: expected {n} parameters, got shape {p.shape}")
    return p


def shape_from_params(model_s: LinearModel, model_e: LinearModel, p_s, p_e) -> DiffArray:
    """Vertex positions ``mean + U_s p_s + U_e p_e`` as an N x 3 array."""
    p_s = _check_len(p_s, model_s.n_components, "shape")
    p_e = _check_len(p_e, model_e.n_components, "expression")
    if model_s.dim != model_e.dim:
        raise ValueError("shape and expression models disagree on vertex count")
    flat = ad.add(ad.add(model_s.mean, ad.matmul(model_s.basis, p_s)), ad.matmul(model_e.basis, p_e))
    return ad.reshape(flat, (-1, 3))


def texture_pca(model_t: LinearModel, p_t, size: tuple[int, int, int], clamp: bool = False) -> DiffArray:
    """UV image ``mean + U_t p_t``. Losses consume the unclamped value."""
    p_t = _check_len(p_t, model_t.n_components, "texture")
    img = ad.reshape(ad.add(model_t.mean, ad.matmul(model_t.basis, p_t)), size)
    return ad.clamp(img, 0.0, 1.0) if clamp else img


def bilinear_taps(uv: np.ndarray, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat texel indices (N, 4) and weights (N, 4) for bilinear lookup.

    Origin top-left, u -> column, v -> row, texel ``i`` centred at ``(i + 0.5) / W``;
    borders clamp to the edge texel.
    """
    uv = np.asarray(uv, dtype=np.float64)
    if uv.size and (uv.min() < 0.0 or uv.max() > 1.0 or not np.all(np.isfinite(uv))):
        raise ValueError("uv coordinates must lie in [0, 1]")
    x = uv[:, 0] * width - 0.5
    y = uv[:, 1] * height - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa, xb = np.clip(x0, 0, width - 1), np.clip(x0 + 1, 0, width - 1)
    ya, yb = np.clip(y0, 0, height - 1), np.clip(y0 + 1, 0, height - 1)
    idx = np.stack([ya * width + xa, ya * width + xb, yb * width + xa, yb * width + xb], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, w


def sample_uv(uv_image, uv_coords: np.ndarray) -> DiffArray:
    """Per-vertex colors (N x C) by bilinear lookup into ``uv_image`` (H x W x C)."""
    img = ad.const(uv_image)
    if img.ndim != 3:
        raise ValueError(f"uv image must be H x W x C, got {img.shape}")
    h, w, c = img.shape
    idx, wts = bilinear_taps(uv_coords, h, w)
    texels = ad.gather(ad.reshape(img, (h * w, c)), idx)  # N x 4 x C
    return ad.sum_(ad.mul(texels, wts[:, :, None]), axis=1)


# ---------------------------------------------------------------------------
# synthetic models

def _grid_dims(n: int) -> tuple[int, int]:
    rows = 0
    for r in range(int(np.sqrt(n)), 1, -1):
        if n % r == 0:
            rows = r
            break
    if rows < 2:
        raise ValueError(f"cannot triangulate {n} vertices on a regular grid")
    return rows, n // rows


def _landmark_layout() -> np.ndarray:
    """Normalized (s, t) positions of a 68-point face layout, t pointing up."""
    pts = []
    a = np.linspace(np.pi * 1.05, np.pi * 1.95, 17)
    pts += list(zip(0.8 * np.cos(a), 0.05 + 0.85 * np.sin(a)))           # jaw
    pts += [(s, 0.55) for s in np.linspace(-0.65, -0.15, 5)]              # brows
    pts += [(s, 0.55) for s in np.linspace(0.15, 0.65, 5)]
    pts += [(0.0, t) for t in np.linspace(0.4, 0.02, 4)]                  # nose bridge
    pts += [(s, -0.1) for s in np.linspace(-0.2, 0.2, 5)]                 # nostrils
    e = np.linspace(np.pi, -np.pi, 6, endpoint=False)
    for cx in (-0.4, 0.4):                                                 # eyes
        pts += list(zip(cx + 0.15 * np.cos(e), 0.35 + 0.06 * np.sin(e)))
    m = np.linspace(np.pi, -np.pi, 12, endpoint=False)
    pts += list(zip(0.35 * np.cos(m), -0.45 + 0.12 * np.sin(m)))          # outer lip
    m = np.linspace(np.pi, -np.pi, 8, endpoint=False)
    pts += list(zip(0.2 * np.cos(m), -0.45 + 0.05 * np.sin(m)))           # inner lip
    return np.asarray(pts)


def _face_surface(s: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Deformed spherical cap facing +z."""
    theta = s * np.deg2rad(65.0)
    phi = t * np.deg2rad(55.0)
    x = 0.85 * np.sin(theta) * np.cos(phi)
    y = 1.1 * np.sin(phi)
    z = np.cos(theta) * np.cos(phi)
    z = z + 0.25 * np.exp(-((s / 0.18) ** 2 + ((t + 0.05) / 0.3) ** 2))   # nose
    z = z - 0.06 * np.exp(-(((np.abs(s) - 0.4) / 0.15) ** 2 + ((t - 0.35) / 0.1) ** 2))  # eye sockets
    z = z + 0.05 * np.exp(-((t - 0.55) / 0.08) ** 2)                    # brow ridge
    return np.stack([x, y, z], axis=-1)


def _smooth_fields(rng: np.random.Generator, st: np.ndarray, count: int, weight: np.ndarray | None = None,
                   features: int = 48) -> np.ndarray:
    """``count`` random low-frequency 3D displacement fields over the grid, as columns."""
    cols = []
    for k in range(count):
        freq = rng.normal(scale=1.0 + 3.0 * k / max(count, 1), size=(features, 2))
        phase = rng.uniform(0, 2 * np.pi, size=features)
        feats = np.cos(st @ freq.T + phase)                  # N x F
        coef = rng.normal(size=(features, 3)) / np.sqrt(features)
        field_ = feats @ coef
        if weight is not None:
            field_ = field_ * weight[:, None]
        cols.append(field_.reshape(-1))
    return np.stack(cols, axis=1)


def _orthonormalize(mat: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(mat)
    q = q * np.sign(np.diag(r))[None, :]
    return q


def synth_model(seed: int = 0, n_vertices: int = 500, n_s: int = 40, n_e: int = 10, n_t: int = 32,
                height: int = 64, width: int = 64) -> FaceModel:
    """Deterministic face-like models at configurable scale."""
    if n_vertices < 4 or min(n_s, n_e, n_t) < 1 or height < 1 or width < 1:
        raise ValueError("need at least 4 vertices and one component per model")
    rows, cols = _grid_dims(n_vertices)
    if n_s + n_e > 3 * n_vertices or n_t > height * width * 3:
        raise ValueError("more components than model dimensions")
    rng = np.random.default_rng(seed)

    t_lin = np.linspace(-1.0, 1.0, rows)
    s_lin = np.linspace(-1.0, 1.0, cols)
    tt, ss = np.meshgrid(t_lin, s_lin, indexing="ij")
    st = np.stack([ss.reshape(-1), tt.reshape(-1)], axis=1)
    verts = _face_surface(st[:, 0], st[:, 1])
    verts = verts - verts.mean(axis=0)

    tris = []
    for i in range(rows - 1):
        for j in range(cols - 1):
            a, b = i * cols + j, i * cols + j + 1
            c, d = (i + 1) * cols + j + 1, (i + 1) * cols + j
            tris.append((a, b, c))
            tris.append((a, c, d))
    uv = np.stack([(st[:, 0] + 1) / 2, 1.0 - (st[:, 1] + 1) / 2], axis=1)

    layout = _landmark_layout()
    d2 = ((layout[:, None, :] - st[None, :, :]) ** 2).sum(-1)
    landmarks = np.argmin(d2, axis=1)
    mesh = Mesh(verts, np.asarray(tris), uv, landmarks)
    if mesh.triangle_areas().min() <= 1e-9:
        raise ValueError("degenerate triangle in synthetic mesh")

    # identity fields are global, expression fields concentrate around mouth and eyes
    mouth = np.exp(-((st[:, 0] / 0.5) ** 2 + ((st[:, 1] + 0.45) / 0.3) ** 2))
    eyes = np.exp(-(((np.abs(st[:, 0]) - 0.4) / 0.3) ** 2 + ((st[:, 1] - 0.4) / 0.25) ** 2))
    raw_s = _smooth_fields(rng, st, n_s)
    raw_e = _smooth_fields(rng, st, n_e, weight=0.2 + mouth + eyes)
    q = _orthonormalize(np.concatenate([raw_s, raw_e], axis=1))
    dim = 3 * n_vertices
    decay_s = 0.9 ** np.arange(n_s)
    decay_e = 0.9 ** np.arange(n_e)
    shape = LinearModel(mesh.vertices.reshape(-1), q[:, :n_s], 0.04 * np.sqrt(dim) * decay_s)
    expression = LinearModel(np.zeros(dim), q[:, n_s:], 0.03 * np.sqrt(dim) * decay_e)

    ty, tx = np.meshgrid((np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width, indexing="ij")
    tex_st = np.stack([2 * tx.reshape(-1) - 1, 1 - 2 * ty.reshape(-1)], axis=1)
    skin = np.array([0.78, 0.58, 0.48])
    shade = 1.0 - 0.15 * (tex_st ** 2).sum(1)
    mean_tex = (shade[:, None] * skin[None, :]).reshape(-1)
    raw_t = []
    for _ in range(n_t):
        freq = rng.normal(scale=2.5, size=(16, 2))
        phase = rng.uniform(0, 2 * np.pi, size=16)
        feats = np.cos(tex_st @ freq.T + phase)
        raw_t.append((feats @ rng.normal(size=(16, 3))).reshape(-1))
    tdim = height * width * 3
    texture = LinearModel(mean_tex, _orthonormalize(np.stack(raw_t, axis=1)),
                          0.08 * np.sqrt(tdim) * 0.9 ** np.arange(n_t))
    return FaceModel(shape, expression, texture, mesh, (height, width, 3))
