"""Synthetic ground-truth scenes used in place of real photographs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .fitter import FitParams, FitSetup
from .morphable_model import shape_from_params
from .renderer import SecondaryDistribution, render, sample_camera, sample_light


@dataclass(frozen=True)
class SceneDistribution:
    """Ground-truth sampling: coefficients are in units of each model's stdev."""

    shape_scale: float = 0.8
    expression_scale: float = 0.4
    latent_scale: float = 0.8
    camera: SecondaryDistribution = SecondaryDistribution(azimuth_deg=(0.0, 15.0), elevation_deg=(0.0, 8.0),
                                                          distance=(5.0, 0.3), focal=(100.0, 5.0))


@dataclass
class View:
    image: np.ndarray
    landmarks: np.ndarray
    params: FitParams
    mask: np.ndarray


@dataclass
class Scene:
    seed: int
    identity: FitParams
    views: list[View]

    @property
    def images(self) -> list[np.ndarray]:
        return [v.image for v in self.views]

    @property
    def landmarks(self) -> list[np.ndarray]:
        return [v.landmarks for v in self.views]


def sample_identity(rng: np.random.Generator, setup: FitSetup, dist: SceneDistribution) -> tuple[np.ndarray, np.ndarray]:
    m = setup.models
    p_s = rng.normal(size=m.shape.n_components) * m.shape.stdev * dist.shape_scale
    p_t = rng.normal(size=setup.latent_dim) * dist.latent_scale
    if not hasattr(setup.decoder, "latent_dim"):
        p_t = p_t * setup.decoder.stdev
    return p_s, p_t


def generate_scene(seed: int, n_views: int, setup: FitSetup, dist: SceneDistribution = SceneDistribution()
                   ) -> Scene:
    """Render ``n_views`` views of one random identity with per-view expression, camera and light."""
    if n_views < 1:
        raise ValueError("need at least one view")
    rng = np.random.default_rng(seed)
    p_s, p_t = sample_identity(rng, setup, dist)
    m = setup.models
    views = []
    for _ in range(n_views):
        p_e = rng.normal(size=m.expression.n_components) * m.expression.stdev * dist.expression_scale
        p_c = sample_camera(rng, dist.camera)
        p_l = sample_light(rng, dist.camera)
        params = FitParams(p_s, p_e, p_t, p_c, p_l)
        out = render(p_s, p_e, p_t, p_c, p_l, m, setup.decoder, setup.settings)
        views.append(View(out.image.data.copy(), out.landmarks.data.copy(), params, out.mask.copy()))
    return Scene(seed, FitParams(p_s, np.zeros(m.expression.n_components), p_t,
                                 views[0].params.p_c, views[0].params.p_l), views)


def identity_vertices(params: FitParams, setup: FitSetup, with_expression: bool = False) -> np.ndarray:
    p_e = params.p_e if with_expression else np.zeros(setup.models.expression.n_components)
    return shape_from_params(setup.models.shape, setup.models.expression, params.p_s, p_e).data


def rigid_procrustes(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation minimising ``|R src + t - dst|`` over known correspondences."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    u, _, vt = np.linalg.svd((dst - mu_d).T @ (src - mu_s))
    d = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))])
    rot = u @ d @ vt
    return rot, mu_d - rot @ mu_s


def vertex_rmse(pred: np.ndarray, gt: np.ndarray, align: bool = True) -> float:
    if align:
        rot, t = rigid_procrustes(pred, gt)
        pred = pred @ rot.T + t
    return float(np.sqrt(((pred - gt) ** 2).sum(1).mean()))


def render_params(params: FitParams, setup: FitSetup):
    return render(params.p_s, params.p_e, params.p_t, params.p_c, params.p_l, setup.models, setup.decoder,
                  setup.settings, with_albedo=True)


def foreground_mae(params: FitParams, view: View, setup: FitSetup) -> float:
    """Mean absolute error over pixels covered in the input view."""
    img = render_params(params, setup).image.data
    return float(np.abs(img - view.image)[view.mask].mean())


def default_setup(seed: int = 0, texture: str = "gan", **model_kwargs) -> FitSetup:
    from .identity_net import init_feature_net, template_from_points
    from .morphable_model import synth_model
    from .renderer import DEFAULT_CAMERA, RenderSettings, project_vertices
    from .texture_gen import init_decoder

    models = synth_model(seed, **model_kwargs)
    h, w, _ = models.uv_size
    decoder = init_decoder(seed, size=h) if texture == "gan" else models.texture
    settings = RenderSettings()
    lms = project_vertices(models.mesh.vertices, DEFAULT_CAMERA, settings.size).data[models.mesh.landmark_indices, :2]
    net = init_feature_net(seed, template=template_from_points(lms))
    return FitSetup(models, decoder, net, settings)


__all__ = ["Scene", "View", "SceneDistribution", "generate_scene", "identity_vertices", "vertex_rmse",
           "foreground_mae", "default_setup", "render_params", "rigid_procrustes"]
