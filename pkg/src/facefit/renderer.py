"""Pinhole projection, z-buffered rasterization and Phong deferred shading.

Coverage (which triangle owns each pixel) is computed without gradients; the
barycentric coordinates, attributes and shading are recomputed on the tape
from that fixed coverage so gradients reach geometry, texture, camera and
light.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numba
import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .morphable_model import FaceModel, LinearModel, sample_uv, shape_from_params, texture_pca
from .texture_gen import DecoderWeights, generate

WORLD_UP = np.array([0.0, 1.0, 0.0])
DEFAULT_CAMERA = np.array([0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 100.0])
DEFAULT_LIGHT = np.array([0.0, 0.0, 5.0, 0.8, 0.8, 0.8, 0.4, 0.4, 0.4])


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class CameraParams:
    position: tuple[float, float, float]
    target: tuple[float, float, float]
    focal: float

    def __post_init__(self):
        if np.allclose(self.position, self.target, atol=0.0, rtol=0.0) or not self.focal > 0:
            raise RenderError("camera needs position != target and positive focal length")

    @classmethod
    def from_vector(cls, p_c) -> "CameraParams":
        p = np.asarray(p_c, dtype=np.float64)
        return cls(tuple(p[0:3]), tuple(p[3:6]), float(p[6]))

    def to_vector(self) -> np.ndarray:
        return np.array([*self.position, *self.target, self.focal])


@dataclass(frozen=True)
class LightParams:
    position: tuple[float, float, float]
    color: tuple[float, float, float]
    ambient: tuple[float, float, float]

    def __post_init__(self):
        if min(self.color) < 0 or min(self.ambient) < 0:
            raise RenderError("light colors must be non-negative")

    @classmethod
    def from_vector(cls, p_l) -> "LightParams":
        p = np.asarray(p_l, dtype=np.float64)
        return cls(tuple(p[0:3]), tuple(p[3:6]), tuple(p[6:9]))

    def to_vector(self) -> np.ndarray:
        return np.array([*self.position, *self.color, *self.ambient])


@dataclass(frozen=True)
class RenderSettings:
    height: int = 64
    width: int = 64
    specular: float = 0.2
    shininess: float = 8.0
    background: float = 0.0
    cull_backfaces: bool = True

    @property
    def size(self) -> tuple[int, int]:
        return self.height, self.width


@dataclass
class RasterMap:
    """Per-pixel triangle id (-1 for background), barycentrics and depth."""

    triangle: np.ndarray
    bary: np.ndarray
    depth: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.triangle >= 0

    def same_coverage(self, other: "RasterMap") -> bool:
        return np.array_equal(self.triangle, other.triangle)


# ---------------------------------------------------------------------------
# projection

def camera_frame(p_c) -> tuple[DiffArray, DiffArray, DiffArray]:
    """Rows of the world->camera rotation (right, up, forward), camera position and focal."""
    p_c = ad.const(p_c)
    pos, tgt, focal = p_c[0:3], p_c[3:6], p_c[6]
    look = ad.sub(tgt, pos)
    if np.linalg.norm(look.data) == 0:
        raise RenderError("camera position coincides with look-at target")
    fwd = ad.normalize(look)
    side = ad.cross(fwd, WORLD_UP)
    if np.linalg.norm(side.data) < 1e-12 * np.linalg.norm(look.data):
        raise RenderError("look direction is parallel to the up vector")
    right = ad.normalize(side)
    up = ad.cross(right, fwd)
    return ad.stack([right, up, fwd], axis=0), pos, focal


def project_vertices(vertices, p_c, image_size: tuple[int, int]) -> DiffArray:
    """N x 3 array of (pixel x, pixel y, camera depth).

    Pixel ``(row i, col j)`` has its centre at ``(j + 0.5, i + 0.5)``; the
    principal point is the image centre and y grows downwards.
    """
    vertices = ad.const(vertices)
    h, w = image_size
    rot, pos, focal = camera_frame(p_c)
    cam = ad.matmul(ad.sub(vertices, pos), ad.transpose(rot))
    depth = cam[:, 2]
    if np.any(depth.data <= 0):
        raise RenderError(f"{int(np.sum(depth.data <= 0))} vertices at or behind the camera plane")
    inv = ad.div(focal, depth)
    x = ad.add(ad.mul(cam[:, 0], inv), w / 2.0)
    y = ad.sub(h / 2.0, ad.mul(cam[:, 1], inv))
    return ad.stack([x, y, depth], axis=1)


# ---------------------------------------------------------------------------
# rasterization

@numba.njit(cache=True)
def _top_left(ux, uy, vx, vy):
    nx = -(vy - uy)
    ny = vx - ux
    return nx > 0.0 or (nx == 0.0 and ny > 0.0)


@numba.njit(cache=True)
def _raster_kernel(xy, depth, tris, height, width, cull, tri_out, bary_out, z_out):
    for t in range(tris.shape[0]):
        ia, ib, ic = tris[t, 0], tris[t, 1], tris[t, 2]
        if depth[ia] <= 0.0 or depth[ib] <= 0.0 or depth[ic] <= 0.0:
            continue
        ax, ay = xy[ia, 0], xy[ia, 1]
        bx, by = xy[ib, 0], xy[ib, 1]
        cx, cy = xy[ic, 0], xy[ic, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0 or not np.isfinite(area):
            continue
        flip = area > 0.0
        if cull and flip:
            continue
        # orient so the interior is on the positive side of every edge
        if not flip:
            bx, by, cx, cy = cx, cy, bx, by
            area = -area
        tl0 = _top_left(bx, by, cx, cy)
        tl1 = _top_left(cx, cy, ax, ay)
        tl2 = _top_left(ax, ay, bx, by)
        x0 = max(int(np.floor(min(ax, bx, cx) - 0.5)), 0)
        x1 = min(int(np.ceil(max(ax, bx, cx) - 0.5)), width - 1)
        y0 = max(int(np.floor(min(ay, by, cy) - 0.5)), 0)
        y1 = min(int(np.ceil(max(ay, by, cy) - 0.5)), height - 1)
        for i in range(y0, y1 + 1):
            py = i + 0.5
            for j in range(x0, x1 + 1):
                px = j + 0.5
                w0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
                w1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
                w2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if (w0 == 0.0 and not tl0) or (w1 == 0.0 and not tl1) or (w2 == 0.0 and not tl2):
                    continue
                la = w0 / area
                if flip:
                    lb, lc = w1 / area, w2 / area
                else:
                    lb, lc = w2 / area, w1 / area
                z = la * depth[ia] + lb * depth[ib] + lc * depth[ic]
                if z < z_out[i, j]:
                    z_out[i, j] = z
                    tri_out[i, j] = t
                    bary_out[i, j, 0] = la
                    bary_out[i, j, 1] = lb
                    bary_out[i, j, 2] = lc


def rasterize(projected, triangles: np.ndarray, image_size: tuple[int, int], cull_backfaces: bool = True
              ) -> RasterMap:
    """Nearest front-facing triangle per pixel centre, top-left fill rule.

    Front faces wind counter-clockwise as seen by the camera (clockwise in
    y-down pixel coordinates). Equal depths resolve to the lower triangle id.
    """
    proj = np.asarray(ad.const(projected).data, dtype=np.float64)
    if not np.all(np.isfinite(proj)):
        raise RenderError("projected coordinates must be finite")
    h, w = image_size
    tri_out = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    zbuf = np.full((h, w), np.inf)
    _raster_kernel(np.ascontiguousarray(proj[:, :2]), np.ascontiguousarray(proj[:, 2]),
                   np.ascontiguousarray(triangles, dtype=np.int64), h, w, cull_backfaces, tri_out, bary, zbuf)
    zbuf[tri_out < 0] = np.inf
    return RasterMap(tri_out, bary, zbuf)


# ---------------------------------------------------------------------------
# normals and shading

@lru_cache(maxsize=8)
def _incidence(n: int, tri_bytes: bytes, t: int) -> np.ndarray:
    tris = np.frombuffer(tri_bytes, dtype=np.int64).reshape(t, 3)
    inc = np.zeros((n, t))
    for k in range(3):
        inc[tris[:, k], np.arange(t)] += 1.0
    inc.setflags(write=False)
    return inc


def incidence_matrix(n_vertices: int, triangles: np.ndarray) -> np.ndarray:
    tris = np.ascontiguousarray(triangles, dtype=np.int64)
    return _incidence(n_vertices, tris.tobytes(), tris.shape[0])


def isolated_vertices(n_vertices: int, triangles: np.ndarray) -> np.ndarray:
    return incidence_matrix(n_vertices, triangles).sum(axis=1) == 0


def vertex_normals(vertices, triangles: np.ndarray) -> DiffArray:
    """Area-weighted vertex normals; vertices with no incident face get a zero normal."""
    vertices = ad.const(vertices)
    tris = np.asarray(triangles, dtype=np.int64)
    a = ad.gather(vertices, tris[:, 0])
    b = ad.gather(vertices, tris[:, 1])
    c = ad.gather(vertices, tris[:, 2])
    face = ad.cross(ad.sub(b, a), ad.sub(c, a))
    summed = ad.matmul(incidence_matrix(vertices.shape[0], tris), face)
    norms = ad.l2_norm(summed, axis=1, keepdims=True)
    return ad.div(summed, ad.add(norms, (norms.data == 0).astype(np.float64)))


def barycentrics(projected, triangles: np.ndarray, raster: RasterMap) -> tuple[DiffArray, np.ndarray, np.ndarray]:
    """Screen-space barycentrics of covered pixel centres, on the tape.

    Returns ``(bary P x 3, flat pixel indices P, vertex ids P x 3)``.
    """
    projected = ad.const(projected)
    h, w = raster.triangle.shape
    pix = np.flatnonzero(raster.triangle.reshape(-1) >= 0)
    tri = raster.triangle.reshape(-1)[pix]
    vids = np.asarray(triangles, dtype=np.int64)[tri]
    px = (pix % w) + 0.5
    py = (pix // w) + 0.5
    xy = projected[:, 0:2]
    corners = [ad.gather(xy, vids[:, k]) for k in range(3)]
    xs = [c[:, 0] for c in corners]
    ys = [c[:, 1] for c in corners]

    def edge(u, v, qx, qy):
        return ad.sub(ad.mul(ad.sub(xs[v], xs[u]), ad.sub(qy, ys[u])),
                      ad.mul(ad.sub(ys[v], ys[u]), ad.sub(qx, xs[u])))

    area = edge(0, 1, xs[2], ys[2])
    lam = [ad.div(edge(1, 2, px, py), area), ad.div(edge(2, 0, px, py), area), ad.div(edge(0, 1, px, py), area)]
    return ad.stack(lam, axis=1), pix, vids


def interpolate(attr, bary: DiffArray, vids: np.ndarray) -> DiffArray:
    """Barycentric blend of per-vertex attributes (N x K) -> P x K."""
    corners = ad.gather(ad.const(attr), vids)          # P x 3 x K
    return ad.sum_(ad.mul(corners, ad.reshape(bary, (bary.shape[0], 3, 1))), axis=1)


def phong(albedo, normal, position, cam_pos, p_l, specular: float = 0.2, shininess: float = 8.0) -> DiffArray:
    """``albedo * (ambient + light * max(0, n.l)) + k_s * light * max(0, r.v)^alpha`` per row."""
    p_l = ad.const(p_l)
    l_pos, l_col, amb = p_l[0:3], p_l[3:6], p_l[6:9]
    n = ad.normalize(normal, axis=1)
    l = ad.normalize(ad.sub(l_pos, position), axis=1)
    v = ad.normalize(ad.sub(cam_pos, position), axis=1)
    ndotl = ad.sum_(ad.mul(n, l), axis=1, keepdims=True)
    r = ad.sub(ad.mul(ad.mul(ndotl, 2.0), n), l)
    diffuse = ad.relu(ndotl)
    out = ad.mul(albedo, ad.add(amb, ad.mul(l_col, diffuse)))
    if specular:
        rdotv = ad.relu(ad.sum_(ad.mul(r, v), axis=1, keepdims=True))
        out = ad.add(out, ad.mul(ad.mul(l_col, ad.power(rdotv, shininess)), specular))
    return out


def composite(values, pix: np.ndarray, image_size: tuple[int, int], background: float = 0.0) -> DiffArray:
    """Scatter P x C pixel values into an H x W x C image over a constant background."""
    values = ad.const(values)
    h, w = image_size
    c = values.shape[1]
    index = np.zeros(h * w, dtype=np.int64)
    index[pix] = np.arange(1, pix.size + 1)
    table = ad.concat([np.full((1, c), float(background)), values], axis=0)
    return ad.reshape(ad.gather(table, index), (h, w, c))


def shade(raster: RasterMap, vertex_colors, normals, vertices, p_c, p_l, projected=None, triangles=None,
          settings: RenderSettings = RenderSettings()) -> DiffArray:
    """Deferred Phong shading of every covered pixel.

    With ``projected`` and ``triangles`` the barycentrics are rebuilt on the
    tape (so gradients reach geometry); otherwise those stored in ``raster``
    are used as constants.
    """
    h, w = raster.triangle.shape
    if projected is not None:
        bary, pix, vids = barycentrics(projected, triangles, raster)
    else:
        if triangles is None:
            raise RenderError("shade needs the triangle list")
        pix = np.flatnonzero(raster.triangle.reshape(-1) >= 0)
        vids = np.asarray(triangles, dtype=np.int64)[raster.triangle.reshape(-1)[pix]]
        bary = ad.const(raster.bary.reshape(-1, 3)[pix])
    albedo = interpolate(vertex_colors, bary, vids)
    normal = interpolate(normals, bary, vids)
    position = interpolate(vertices, bary, vids)
    cam_pos = ad.const(p_c)[0:3]
    values = phong(albedo, normal, position, cam_pos, p_l, settings.specular, settings.shininess)
    return composite(values, pix, (h, w), settings.background)


# ---------------------------------------------------------------------------
# full pipeline

@dataclass
class RenderOutput:
    image: DiffArray
    raster: RasterMap
    projected: DiffArray
    vertices: DiffArray
    landmarks: DiffArray
    albedo_image: DiffArray | None = None

    @property
    def mask(self) -> np.ndarray:
        return self.raster.mask


def uv_texture(texture_model, p_t, uv_size) -> DiffArray:
    if isinstance(texture_model, DecoderWeights):
        return generate(texture_model, p_t)
    if isinstance(texture_model, LinearModel):
        return texture_pca(texture_model, p_t, uv_size)
    raise TypeError(f"unsupported texture model {type(texture_model).__name__}")


def render(p_s, p_e, p_t, p_c, p_l, models: FaceModel, decoder, settings: RenderSettings = RenderSettings(),
           raster: RasterMap | None = None, with_albedo: bool = False) -> RenderOutput:
    """Shape -> projection -> rasterization -> UV sampling -> Phong shading.

    ``decoder`` is either :class:`DecoderWeights` or the PCA texture
    :class:`LinearModel`. Pass ``raster`` to reuse a fixed coverage.
    """
    mesh = models.mesh
    verts = shape_from_params(models.shape, models.expression, p_s, p_e)
    proj = project_vertices(verts, p_c, settings.size)
    if raster is None:
        raster = rasterize(proj, mesh.triangles, settings.size, settings.cull_backfaces)
    colors = sample_uv(uv_texture(decoder, p_t, models.uv_size), mesh.uv)
    normals = vertex_normals(verts, mesh.triangles)
    image = shade(raster, colors, normals, verts, p_c, p_l, projected=proj, triangles=mesh.triangles,
                  settings=settings)
    landmarks = ad.gather(proj[:, 0:2], mesh.landmark_indices)
    albedo = None
    if with_albedo:
        bary, pix, vids = barycentrics(proj, mesh.triangles, raster)
        albedo = composite(interpolate(colors, bary, vids), pix, settings.size, settings.background)
    return RenderOutput(image, raster, proj, verts, landmarks, albedo)


@dataclass(frozen=True)
class SecondaryDistribution:
    """Sampling distributions for the randomized identity render."""

    sigma_e: float = 0.5
    distance: tuple[float, float] = (5.0, 0.5)
    azimuth_deg: tuple[float, float] = (0.0, 20.0)
    elevation_deg: tuple[float, float] = (0.0, 10.0)
    focal: tuple[float, float] = (100.0, 10.0)
    light_position: tuple[tuple[float, float, float], float] = ((0.0, 0.0, 5.0), 1.0)
    light_color: tuple[float, float] = (0.8, 0.1)
    ambient: tuple[float, float] = (0.4, 0.1)
    max_attempts: int = 10


def sample_camera(rng: np.random.Generator, dist: SecondaryDistribution = SecondaryDistribution()) -> np.ndarray:
    d = rng.normal(*dist.distance)
    az = np.deg2rad(rng.normal(*dist.azimuth_deg))
    el = np.deg2rad(rng.normal(*dist.elevation_deg))
    f = rng.normal(*dist.focal)
    pos = d * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    return np.concatenate([pos, np.zeros(3), [f]])


def sample_light(rng: np.random.Generator, dist: SecondaryDistribution = SecondaryDistribution()) -> np.ndarray:
    mu, sd = dist.light_position
    pos = rng.normal(mu, sd)
    col = np.maximum(rng.normal(*dist.light_color, size=3), 0.0)
    amb = np.maximum(rng.normal(*dist.ambient, size=3), 0.0)
    return np.concatenate([pos, col, amb])


def bounding_radius(vertices: np.ndarray) -> float:
    return float(np.linalg.norm(vertices, axis=1).max())


@dataclass
class SecondarySample:
    p_e: np.ndarray
    p_c: np.ndarray
    p_l: np.ndarray
    attempts: int = 1


def sample_secondary(rng: np.random.Generator, models: FaceModel, vertices: np.ndarray,
                     dist: SecondaryDistribution = SecondaryDistribution()) -> SecondarySample:
    """Draw expression, camera and light; cameras inside the mesh bounding sphere are redrawn."""
    n_e = models.expression.n_components
    p_e = rng.normal(0.0, dist.sigma_e, size=n_e) if dist.sigma_e > 0 else np.zeros(n_e)
    radius = bounding_radius(vertices)
    for attempt in range(1, dist.max_attempts + 1):
        p_c = sample_camera(rng, dist)
        if np.linalg.norm(p_c[:3]) > radius and p_c[6] > 0:
            return SecondarySample(p_e, p_c, sample_light(rng, dist), attempt)
    raise RenderError(f"no valid secondary camera after {dist.max_attempts} attempts")


def render_random(p_s, p_t, rng: np.random.Generator, models: FaceModel, decoder,
                  settings: RenderSettings = RenderSettings(),
                  dist: SecondaryDistribution = SecondaryDistribution(),
                  sample: SecondarySample | None = None, raster: RasterMap | None = None
                  ) -> tuple[RenderOutput, SecondarySample]:
    """Render the identity (``p_s``, ``p_t``) under sampled expression, camera and light."""
    if sample is None:
        base = shape_from_params(models.shape, models.expression, ad.const(p_s).data,
                                 np.zeros(models.expression.n_components)).data
        sample = sample_secondary(rng, models, base, dist)
    out = render(p_s, sample.p_e, p_t, sample.p_c, sample.p_l, models, decoder, settings, raster=raster)
    return out, sample
