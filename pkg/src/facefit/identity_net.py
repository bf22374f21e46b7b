"""Frozen random conv feature extractor and landmark-based similarity alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .nn import conv2d, conv_output_size, dense

INPUT_SIZE = 112


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureNet:
    convs: tuple[tuple[np.ndarray, np.ndarray], ...]
    head: tuple[np.ndarray, np.ndarray]
    template: np.ndarray
    input_size: int = INPUT_SIZE
    seed: int = 0

    def __post_init__(self):
        c = 3
        for w, b in self.convs:
            if w.shape[0] != 9 * c or b.shape != (w.shape[1],):
                raise ValueError("convolution weights do not chain")
            c = w.shape[1]
        if self.head[0].shape[0] != c:
            raise ValueError("embedding layer does not match last conv")
        for arr in [*(x for pair in self.convs for x in pair), *self.head, self.template]:
            arr.setflags(write=False)

    @property
    def n_layers(self) -> int:
        return len(self.convs)

    @property
    def embedding_dim(self) -> int:
        return self.head[0].shape[1]

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        shapes, size = [], self.input_size
        for w, _ in self.convs:
            size = conv_output_size(size, 3, 2, 1)
            shapes.append((size, size, w.shape[1]))
        return shapes


@dataclass
class FeatureStack:
    embedding: DiffArray
    intermediates: list[DiffArray]


@dataclass(frozen=True)
class Similarity:
    """``y = scale * R @ x + translation`` in pixel-centre coordinates."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    residual: float = 0.0

    @property
    def angle(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(pts) @ self.rotation.T + self.translation

    def inverse_apply(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.translation) @ self.rotation / self.scale


def default_template(size: int = INPUT_SIZE) -> np.ndarray:
    from .morphable_model import _landmark_layout

    st = _landmark_layout()
    return np.stack([size / 2 + 0.36 * size * st[:, 0], size / 2 - 0.36 * size * st[:, 1]], axis=1)


def template_from_points(points: np.ndarray, size: int = INPUT_SIZE, fill: float = 0.7) -> np.ndarray:
    """Centre and scale a 68 x 2 point set so its bounding box spans ``fill`` of the frame."""
    pts = np.asarray(points, dtype=np.float64)
    lo, hi = pts.min(0), pts.max(0)
    scale = fill * size / max(hi - lo)
    return (pts - (lo + hi) / 2) * scale + size / 2


def init_feature_net(seed: int = 0, template: np.ndarray | None = None, channels=(8, 16, 32, 64),
                     embedding_dim: int = 64, stdev: float = 0.1, input_size: int = INPUT_SIZE) -> FeatureNet:
    """Gaussian weights, zero biases.

    Random biases would add the same offset to every embedding and squeeze
    cosine distances between different faces towards zero.
    """
    rng = np.random.default_rng(seed)
    convs, c = [], 3
    for c_out in channels:
        convs.append((rng.normal(0, stdev, (9 * c, c_out)), np.zeros(c_out)))
        c = c_out
    head = (rng.normal(0, stdev, (c, embedding_dim)), np.zeros(embedding_dim))
    template = default_template(input_size) if template is None else np.array(template, dtype=np.float64)
    return FeatureNet(tuple(convs), head, template, input_size, seed)


def similarity_fit(src: np.ndarray, dst: np.ndarray) -> Similarity:
    """Least-squares similarity mapping ``src`` onto ``dst`` (closed-form Procrustes)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise AlignmentError("point sets must both be K x 2")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs ** 2).sum() / len(src)
    if len(src) < 2 or np.linalg.matrix_rank(xs, tol=1e-9 * max(1.0, np.abs(src).max())) < 1 or var_s <= 0:
        raise AlignmentError("degenerate landmark configuration")
    cov = xd.T @ xs / len(src)
    u, sv, vt = np.linalg.svd(cov)
    d = np.ones(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[1] = -1.0
    rot = u @ np.diag(d) @ vt
    scale = float((sv * d).sum() / var_s)
    trans = mu_d - scale * rot @ mu_s
    res = float(np.sqrt(((scale * src @ rot.T + trans - dst) ** 2).sum(1).mean()))
    return Similarity(scale, rot, trans, res)


def warp_taps(transform: Similarity, src_shape: tuple[int, int], out_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear taps into the source image for every output pixel; out-of-frame taps hit a zero row."""
    h, w = src_shape
    ii, jj = np.meshgrid(np.arange(out_size) + 0.5, np.arange(out_size) + 0.5, indexing="ij")
    q = np.stack([jj.reshape(-1), ii.reshape(-1)], axis=1)
    p = transform.inverse_apply(q)
    x = p[:, 0] - 0.5
    y = p[:, 1] - 0.5
    x0, y0 = np.floor(x), np.floor(y)
    fx, fy = x - x0, y - y0
    x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
    idx, wts = [], []
    for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)), (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xx, yy = x0 + dx, y0 + dy
        ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        idx.append(np.where(ok, yy * w + xx, h * w))
        wts.append(np.where(ok, wt, 0.0))
    return np.stack(idx, axis=1), np.stack(wts, axis=1)


def align_to_template(image, landmarks: np.ndarray, template: np.ndarray, out_size: int = INPUT_SIZE
                      ) -> tuple[DiffArray, Similarity]:
    """Warp ``image`` so ``landmarks`` land on ``template``.

    The transform is a constant of the step; the result is differentiable in
    the input pixels only.
    """
    image = ad.const(image)
    transform = similarity_fit(ad.const(landmarks).data, template)
    return warp(image, transform, out_size), transform


def warp(image, transform: Similarity, out_size: int) -> DiffArray:
    image = ad.const(image)
    h, w, c = image.shape
    idx, wts = warp_taps(transform, (h, w), out_size)
    flat = ad.concat([ad.reshape(image, (h * w, c)), np.zeros((1, c))], axis=0)
    out = ad.sum_(ad.mul(ad.gather(flat, idx), wts[:, :, None]), axis=1)
    return ad.reshape(out, (out_size, out_size, c))


def extract(net: FeatureNet, image) -> FeatureStack:
    """Embedding and per-block activations; pixels are centred to [-1, 1] first."""
    image = ad.const(image)
    if image.shape != (net.input_size, net.input_size, 3):
        raise ValueError(f"expected {(net.input_size, net.input_size, 3)} input, got {image.shape}")
    x = ad.mul(ad.sub(image, 0.5), 2.0)
    inter = []
    for w, b in net.convs:
        x = ad.tanh(conv2d(x, w, b, stride=2, pad=1))
        inter.append(x)
    pooled = ad.mean(ad.reshape(x, (-1, x.shape[2])), axis=0)
    return FeatureStack(dense(pooled, *net.head), inter)
