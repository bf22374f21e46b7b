"""Face shape and texture recovery by differentiable inverse rendering on synthetic data."""

from .autodiff import DiffArray, Tape, check_gradient
from .evaluation import crop_radius, icp_align, point_to_plane
from .fitter import FitConfig, FitParams, FitSetup, fit_multi, fit_single
from .losses import LossWeights
from .morphable_model import FaceModel, LinearModel, Mesh, synth_model
from .renderer import render
from .texture_gen import generate, init_decoder, invert_texture

__version__ = "0.1.0"
