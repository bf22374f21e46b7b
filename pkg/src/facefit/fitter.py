"""Two-stage analysis-by-synthesis fitting with multi-image identity averaging."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .identity_net import FeatureNet, FeatureStack, align_to_template, extract, similarity_fit, warp
from .losses import EnergyTerms, LossWeights, TERMS, content_loss, identity_loss, landmark_loss, pixel_loss, \
    regularization, total_energy, unweighted
from .morphable_model import FaceModel, shape_from_params
from .optim import AdamState, DivergenceError, adam_step
from .renderer import DEFAULT_CAMERA, DEFAULT_LIGHT, RenderError, RenderSettings, SecondaryDistribution, \
    SecondarySample, project_vertices, render, render_random

log = logging.getLogger(__name__)

BLOCKS = ("p_s", "p_e", "p_t", "p_c", "p_l")
IDENTITY_BLOCKS = ("p_s", "p_t")
STAGE1_BLOCKS = ("p_s", "p_e", "p_c")
DIVERGENCE_LIMIT = 1e6


@dataclass
class FitParams:
    p_s: np.ndarray
    p_e: np.ndarray
    p_t: np.ndarray
    p_c: np.ndarray
    p_l: np.ndarray

    def __post_init__(self):
        for name in BLOCKS:
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64).reshape(-1))
        if self.p_c.size != 7 or self.p_l.size != 9:
            raise ValueError("camera needs 7 and light 9 parameters")

    @classmethod
    def default(cls, models: FaceModel, latent_dim: int) -> "FitParams":
        return cls(np.zeros(models.shape.n_components), np.zeros(models.expression.n_components),
                   np.zeros(latent_dim), DEFAULT_CAMERA.copy(), DEFAULT_LIGHT.copy())

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BLOCKS}

    @classmethod
    def from_dict(cls, blocks) -> "FitParams":
        return cls(**{name: blocks[name] for name in BLOCKS})

    def copy(self) -> "FitParams":
        return FitParams.from_dict({k: v.copy() for k, v in self.as_dict().items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.as_dict().values())

    def bitwise_equal(self, other: "FitParams") -> bool:
        return all(a.tobytes() == b.tobytes() for a, b in zip(self.as_dict().values(), other.as_dict().values()))


@dataclass(frozen=True)
class FitConfig:
    weights: LossWeights = field(default_factory=LossWeights.desk)
    lr: float = 0.01
    stage1_steps: int = 200
    stage2_steps: int = 400
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropped: tuple[str, ...] = ()

    def __post_init__(self):
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ValueError("step counts must be non-negative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    def drop(self, *terms: str) -> "FitConfig":
        return replace(self, weights=self.weights.drop(*terms), dropped=tuple(self.dropped) + tuple(terms))


@dataclass(frozen=True)
class FitSetup:
    """The frozen pieces every energy evaluation needs."""

    models: FaceModel
    decoder: object
    net: FeatureNet
    settings: RenderSettings = RenderSettings()
    secondary: SecondaryDistribution = SecondaryDistribution()

    @property
    def latent_dim(self) -> int:
        dec = self.decoder
        return dec.latent_dim if hasattr(dec, "latent_dim") else dec.n_components


@dataclass
class Target:
    image: np.ndarray
    landmarks: np.ndarray
    features: FeatureStack

    @classmethod
    def prepare(cls, image: np.ndarray, landmarks: np.ndarray, net: FeatureNet) -> "Target":
        aligned, _ = align_to_template(image, landmarks, net.template, net.input_size)
        stack = extract(net, aligned)
        frozen = FeatureStack(ad.DiffArray(stack.embedding.data),
                              [ad.DiffArray(x.data) for x in stack.intermediates])
        return cls(np.asarray(image, dtype=np.float64), np.asarray(landmarks, dtype=np.float64), frozen)


@dataclass
class StepContext:
    """Quantities held constant within one step: coverage, alignments, secondary sample."""

    raster: object = None
    transform: object = None
    secondary: SecondarySample | None = None
    secondary_raster: object = None
    secondary_transform: object = None


def step_rng(seed: int, image_seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, image_seed, iteration])


def stage1_energy(blocks, target: Target, setup: FitSetup, weights: LossWeights):
    verts = shape_from_params(setup.models.shape, setup.models.expression, blocks["p_s"], blocks["p_e"])
    proj = project_vertices(verts, blocks["p_c"], setup.settings.size)
    lms = ad.gather(proj[:, 0:2], setup.models.mesh.landmark_indices)
    lan = landmark_loss(target.landmarks, lms)
    return ad.mul(lan, weights.lan), lan


def energy(blocks, target: Target, setup: FitSetup, weights: LossWeights, ctx: StepContext,
           rng: np.random.Generator | None = None):
    """Full weighted energy. Missing entries of ``ctx`` are computed and stored.

    Returns ``(total, terms, breakdown, primary RenderOutput)``.
    """
    net = setup.net
    out = render(blocks["p_s"], blocks["p_e"], blocks["p_t"], blocks["p_c"], blocks["p_l"], setup.models,
                 setup.decoder, setup.settings, raster=ctx.raster)
    ctx.raster = out.raster
    if not out.mask.any():
        raise DivergenceError("rendered face left the image")
    if ctx.transform is None:
        ctx.transform = similarity_fit(out.landmarks.data, net.template)
    feats = extract(net, warp(out.image, ctx.transform, net.input_size))

    sec, sample = render_random(blocks["p_s"], blocks["p_t"], rng if rng is not None else np.random.default_rng(0),
                                setup.models, setup.decoder, setup.settings, setup.secondary,
                                sample=ctx.secondary, raster=ctx.secondary_raster)
    ctx.secondary, ctx.secondary_raster = sample, sec.raster
    if sec.mask.any():
        if ctx.secondary_transform is None:
            ctx.secondary_transform = similarity_fit(sec.landmarks.data, net.template)
        sec_feats = extract(net, warp(sec.image, ctx.secondary_transform, net.input_size))
        id_hat = identity_loss(target.features.embedding, sec_feats.embedding)
    else:
        id_hat = ad.const(0.0)

    reg_s, reg_l = regularization(blocks["p_s"], blocks["p_e"], blocks["p_l"], setup.models)
    terms = EnergyTerms(
        id=identity_loss(target.features.embedding, feats.embedding),
        id_hat=id_hat,
        con=content_loss(target.features, feats),
        pix=pixel_loss(target.image, out.image, out.mask),
        lan=landmark_loss(target.landmarks, out.landmarks),
        reg_shape=reg_s,
        reg_light=reg_l,
    )
    total, breakdown = total_energy(terms, weights)
    return total, terms, breakdown, out


@dataclass
class FitResult:
    params: FitParams
    trace: list[dict[str, float]] = field(default_factory=list)
    stage1_trace: list[float] = field(default_factory=list)
    final_terms: dict[str, float] = field(default_factory=dict)
    per_image: list[FitParams] = field(default_factory=list)
    config: FitConfig | None = None


def shifted_mean(values: list[np.ndarray]) -> np.ndarray:
    """Arithmetic mean computed as ``v0 + mean(v - v0)``; exact when all values agree."""
    base = values[0]
    if len(values) == 1:
        return base.copy()
    return base + np.mean(np.stack([v - base for v in values]), axis=0)


def _grads(tape: ad.Tape, total, leaves, names):
    return tape.backward(total, {k: leaves[k] for k in names})


def _run_stage1(states, per_image, targets, setup, config, trace):
    names = STAGE1_BLOCKS
    for step in range(config.stage1_steps):
        candidates, losses = [], []
        for i, target in enumerate(targets):
            tape = ad.Tape()
            leaves = {k: tape.leaf(v, k) for k, v in per_image[i].as_dict().items()}
            try:
                total, lan = stage1_energy(leaves, target, setup, config.weights)
            except RenderError as exc:
                raise DivergenceError(f"stage 1 failed at step {step}: {exc}", per_image[i].copy()) from exc
            val = total.item()
            if not np.isfinite(val) or val > DIVERGENCE_LIMIT:
                raise DivergenceError(f"stage 1 diverged at step {step} (loss {val})", per_image[i].copy())
            grads = _grads(tape, total, leaves, names)
            new, states[i] = adam_step(per_image[i].as_dict(), grads, states[i], config.lr, config.beta1,
                                       config.beta2, config.eps)
            candidates.append(FitParams.from_dict(new))
            losses.append(lan.item())
        shared = shifted_mean([c.p_s for c in candidates])
        for i, c in enumerate(candidates):
            c.p_s = shared.copy()
            per_image[i] = c
        trace.append(float(np.mean(losses)))


def _run_stage2(states, per_image, targets, setup, config, image_seeds, trace):
    for step in range(config.stage2_steps):
        candidates, rows = [], []
        for i, target in enumerate(targets):
            rng = step_rng(config.seed, image_seeds[i], step)
            tape = ad.Tape()
            leaves = {k: tape.leaf(v, k) for k, v in per_image[i].as_dict().items()}
            try:
                total, terms, breakdown, _ = energy(leaves, target, setup, config.weights, StepContext(), rng)
            except RenderError as exc:
                raise DivergenceError(f"stage 2 failed at step {step}: {exc}", per_image[i].copy()) from exc
            val = total.item()
            if not np.isfinite(val) or val > DIVERGENCE_LIMIT:
                raise DivergenceError(f"stage 2 diverged at step {step} (energy {val})", per_image[i].copy())
            grads = _grads(tape, total, leaves, BLOCKS)
            new, states[i] = adam_step(per_image[i].as_dict(), grads, states[i], config.lr, config.beta1,
                                       config.beta2, config.eps)
            candidates.append(FitParams.from_dict(new))
            raw = unweighted(terms)
            rows.append({"total": val, **{k: raw[k] for k in TERMS if k != "reg"},
                         "reg": raw["reg_shape"] + raw["reg_light"]})
        for name in IDENTITY_BLOCKS:
            shared = shifted_mean([getattr(c, name) for c in candidates])
            for c in candidates:
                setattr(c, name, shared.copy())
        per_image[:] = candidates
        row = {"iter": step}
        for key in rows[0]:
            row[key] = float(np.mean([r[key] for r in rows]))
        trace.append(row)
        if step % 50 == 0:
            log.debug("stage2 step %d total %.6f", step, row["total"])


def evaluate_terms(params: FitParams, target: Target, setup: FitSetup, config: FitConfig,
                   eval_seed: int = 12345) -> dict[str, float]:
    """Unweighted energy terms at ``params`` with a fixed secondary sample."""
    blocks = {k: ad.DiffArray(v) for k, v in params.as_dict().items()}
    _, terms, breakdown, _ = energy(blocks, target, setup, config.weights, StepContext(),
                                    np.random.default_rng(eval_seed))
    out = unweighted(terms)
    out["total"] = breakdown["total"]
    return out


def fit_multi(images, landmarks_list, setup: FitSetup, config: FitConfig = FitConfig(),
              init: FitParams | list[FitParams] | None = None, image_seeds=None) -> FitResult:
    """Fit shared identity (p_s, p_t) and per-image expression, camera, light.

    After every update the per-image identity candidates are averaged into the
    shared blocks. ``image_seeds[i]`` keys image ``i``'s secondary-render
    stream (defaults to the image index).
    """
    if len(images) == 0:
        raise ValueError("need at least one image")
    if len(images) != len(landmarks_list):
        raise ValueError("one landmark set per image required")
    n = len(images)
    image_seeds = list(range(n)) if image_seeds is None else list(image_seeds)
    targets = [Target.prepare(img, lm, setup.net) for img, lm in zip(images, landmarks_list)]
    if init is None:
        init = FitParams.default(setup.models, setup.latent_dim)
    per_image = [p.copy() for p in init] if isinstance(init, list) else [init.copy() for _ in range(n)]

    states = [AdamState() for _ in range(n)]
    stage1: list[float] = []
    _run_stage1(states, per_image, targets, setup, config, stage1)
    # stage 2 starts its own moment estimates
    states = [AdamState() for _ in range(n)]
    trace: list[dict[str, float]] = []
    _run_stage2(states, per_image, targets, setup, config, image_seeds, trace)

    final = {}
    if targets:
        rows = [evaluate_terms(p, t, setup, config) for p, t in zip(per_image, targets)]
        final = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    return FitResult(per_image[0].copy(), trace, stage1, final, [p.copy() for p in per_image], config)


def fit_single(image, landmarks, setup: FitSetup, config: FitConfig = FitConfig(),
               init: FitParams | None = None, image_seed: int = 0) -> FitResult:
    return fit_multi([image], [landmarks], setup, config, init, [image_seed])


def fit_stage1(image, landmarks, params0: FitParams, setup: FitSetup, config: FitConfig = FitConfig()
               ) -> FitResult:
    """Landmark-only alignment of shape, expression and camera."""
    cfg = replace(config, stage2_steps=0)
    target = Target(np.asarray(image, dtype=np.float64), np.asarray(landmarks, dtype=np.float64), None)
    per_image = [params0.copy()]
    trace: list[float] = []
    _run_stage1([AdamState()], per_image, [target], setup, cfg, trace)
    return FitResult(per_image[0], [], trace, {}, per_image, cfg)


def trace_header(config: FitConfig) -> list[str]:
    w = config.weights
    weights = " ".join(f"{f.name}={getattr(w, f.name)!r}" for f in fields(w))
    dropped = ",".join(config.dropped) if config.dropped else "none"
    return [f"# weights: {weights}", f"# dropped: {dropped}",
            f"# lr={config.lr!r} stage1_steps={config.stage1_steps} stage2_steps={config.stage2_steps} "
            f"seed={config.seed}"]
