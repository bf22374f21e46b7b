"""Energy terms and their weighted combination."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .identity_net import FeatureStack

TERMS = ("id", "id_hat", "con", "pix", "lan", "reg")


@dataclass(frozen=True)
class LossWeights:
    id: float = 2.0
    id_hat: float = 2.0
    con: float = 50.0
    pix: float = 1.0
    lan: float = 0.001
    reg_shape: float = 0.05
    reg_light: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be finite and non-negative, got {v}")

    @classmethod
    def desk(cls) -> "LossWeights":
        """Defaults recalibrated for 64 px renders, an untrained feature net and stdev-normalised regularization.

        The secondary-view identity term is down-weighted because a random
        embedding is not invariant to pose and lighting, so that term is noisy.
        """
        return cls(id_hat=0.2, pix=2.0, lan=0.05, reg_shape=0.001)

    def drop(self, *terms: str) -> "LossWeights":
        """Copy with the named terms zeroed (``reg`` zeroes both regularizers)."""
        values = asdict(self)
        for term in terms:
            keys = ("reg_shape", "reg_light") if term == "reg" else (term,)
            for key in keys:
                if key not in values:
                    raise ValueError(f"unknown loss term {term!r}")
                values[key] = 0.0
        return LossWeights(**values)


def identity_loss(emb_a, emb_b) -> DiffArray:
    """Cosine distance ``1 - a.b / (|a| |b|)``."""
    a, b = ad.const(emb_a), ad.const(emb_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"embeddings must be equal-length vectors, got {a.shape} and {b.shape}")
    na, nb = ad.l2_norm(a), ad.l2_norm(b)
    if na.data == 0 or nb.data == 0:
        raise ValueError("zero-norm embedding")
    return ad.sub(1.0, ad.div(ad.dot(a, b), ad.mul(na, nb)))


def content_loss(stack_a: FeatureStack, stack_b: FeatureStack) -> DiffArray:
    """Sum over layers of ``||F_a - F_b||_2 / (H * W * C)``."""
    if len(stack_a.intermediates) != len(stack_b.intermediates):
        raise ValueError("feature stacks have different depths")
    total = ad.const(0.0)
    for fa, fb in zip(stack_a.intermediates, stack_b.intermediates):
        fa, fb = ad.const(fa), ad.const(fb)
        if fa.shape != fb.shape:
            raise ValueError(f"layer shape mismatch {fa.shape} vs {fb.shape}")
        total = ad.add(total, ad.div(ad.l2_norm(ad.sub(fa, fb)), float(fa.size)))
    return total


def pixel_loss(img_a, img_b, mask: np.ndarray | None = None) -> DiffArray:
    """Mean absolute difference over masked pixels and all channels."""
    a, b = ad.const(img_a), ad.const(img_b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = ad.sub(a, b)
    if mask is None:
        return ad.mean(ad.abs_(diff))
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("empty pixel mask")
    h, w = mask.shape
    rows = ad.gather(ad.reshape(diff, (h * w, -1)), np.flatnonzero(mask.reshape(-1)))
    return ad.div(ad.l1_norm(rows), float(rows.size))


def landmark_loss(lm_a, lm_b) -> DiffArray:
    """Mean Euclidean distance between corresponding 2D points."""
    a, b = ad.const(lm_a), ad.const(lm_b)
    if a.shape != b.shape:
        raise ValueError(f"landmark shapes differ: {a.shape} vs {b.shape}")
    return ad.mean(ad.l2_norm(ad.sub(a, b), axis=1))


def shape_regularization(p_s, p_e, sigma_s: np.ndarray, sigma_e: np.ndarray) -> DiffArray:
    return ad.add(ad.sum_(ad.power(ad.div(p_s, sigma_s), 2)), ad.sum_(ad.power(ad.div(p_e, sigma_e), 2)))


def light_regularization(p_l, p_l_default: np.ndarray) -> DiffArray:
    return ad.sum_(ad.power(ad.sub(p_l, p_l_default), 2))


def regularization(p_s, p_e, p_l, models, p_l_default: np.ndarray | None = None) -> tuple[DiffArray, DiffArray]:
    """Unweighted ``(sum (p/sigma)^2 over shape and expression, |p_l - default|^2)``.

    The caller applies ``reg_shape`` and ``reg_light``.
    """
    from .renderer import DEFAULT_LIGHT

    default = DEFAULT_LIGHT if p_l_default is None else p_l_default
    return (shape_regularization(p_s, p_e, models.shape.stdev, models.expression.stdev),
            light_regularization(p_l, default))


@dataclass
class EnergyTerms:
    """Unweighted term values (DiffArrays on the tape when recorded)."""

    id: DiffArray
    id_hat: DiffArray
    con: DiffArray
    pix: DiffArray
    lan: DiffArray
    reg_shape: DiffArray
    reg_light: DiffArray


def total_energy(terms: EnergyTerms, weights: LossWeights) -> tuple[DiffArray, dict[str, float]]:
    """Weighted sum and per-term breakdown.

    The breakdown holds weighted contributions keyed by :data:`TERMS` (``reg``
    combines both regularizers) plus ``total``; they sum to the total.
    """
    parts = {
        "id": ad.mul(terms.id, weights.id),
        "id_hat": ad.mul(terms.id_hat, weights.id_hat),
        "con": ad.mul(terms.con, weights.con),
        "pix": ad.mul(terms.pix, weights.pix),
        "lan": ad.mul(terms.lan, weights.lan),
        "reg": ad.add(ad.mul(terms.reg_shape, weights.reg_shape), ad.mul(terms.reg_light, weights.reg_light)),
    }
    total = ad.const(0.0)
    for key in TERMS:
        total = ad.add(total, parts[key])
    breakdown = {k: float(v.data) for k, v in parts.items()}
    breakdown["total"] = float(total.data)
    return total, breakdown


def unweighted(terms: EnergyTerms) -> dict[str, float]:
    return {f.name: float(ad.const(getattr(terms, f.name)).data) for f in fields(terms)}
