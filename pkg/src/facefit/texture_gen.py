"""Fixed-seed convolutional texture decoder and latent inversion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .nn import conv2d, dense, upsample2x
from .optim import AdamState, DivergenceError, adam_step


@dataclass(frozen=True)
class DecoderWeights:
    """Latent -> dense -> 4x4 map -> (upsample, 3x3 conv, tanh) blocks -> 1x1 conv -> sigmoid."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    seed: int = 0
    base: int = 4
    base_channels: int = 8

    def __post_init__(self):
        w0, b0 = self.layers[0]
        if w0.shape[1] != self.base * self.base * self.base_channels or b0.shape != (w0.shape[1],):
            raise ValueError("dense layer does not produce the base feature map")
        c = self.base_channels
        for w, b in self.layers[1:]:
            k2 = w.shape[0] // c
            if k2 * c != w.shape[0] or k2 not in (1, 9) or b.shape != (w.shape[1],):
                raise ValueError("convolution weights do not chain")
            c = w.shape[1]
        for w, b in self.layers:
            w.setflags(write=False)
            b.setflags(write=False)

    @property
    def latent_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def n_blocks(self) -> int:
        return len(self.layers) - 2

    @property
    def output_shape(self) -> tuple[int, int, int]:
        side = self.base * 2 ** self.n_blocks
        return side, side, self.layers[-1][0].shape[1]


_SKIN = np.array([0.78, 0.58, 0.48])


def init_decoder(seed: int = 0, latent_dim: int = 64, size: int = 64, channels: tuple[int, ...] = (16, 16, 8, 8),
                 stdev: float = 0.2, out_channels: int = 3) -> DecoderWeights:
    """Gaussian-initialised, frozen decoder producing ``size`` x ``size`` x ``out_channels``."""
    n_blocks = int(round(np.log2(size / 4)))
    if 4 * 2 ** n_blocks != size:
        raise ValueError("size must be 4 * 2**k")
    channels = tuple(channels)[:n_blocks] if len(channels) >= n_blocks else tuple(channels) + (
        channels[-1],) * (n_blocks - len(channels))
    rng = np.random.default_rng(seed)
    base_c = 8
    layers = [(rng.normal(0, stdev, (latent_dim, 16 * base_c)), np.zeros(16 * base_c))]
    c = base_c
    for c_out in channels:
        layers.append((rng.normal(0, stdev, (9 * c, c_out)), np.zeros(c_out)))
        c = c_out
    # output bias centres the texture on a skin tone
    bias = np.log(_SKIN / (1 - _SKIN)) if out_channels == 3 else np.zeros(out_channels)
    layers.append((rng.normal(0, stdev, (c, out_channels)), bias))
    return DecoderWeights(tuple(layers), seed=seed, base=4, base_channels=base_c)


def generate(weights: DecoderWeights, p_t) -> ad.DiffArray:
    """UV image in (0, 1) for latent ``p_t``."""
    p_t = ad.const(p_t)
    if p_t.ndim != 1 or p_t.shape[0] != weights.latent_dim:
        raise ValueError(f"latent must have length {weights.latent_dim}, got shape {p_t.shape}")
    w0, b0 = weights.layers[0]
    x = ad.tanh(dense(p_t, w0, b0))
    x = ad.reshape(x, (weights.base, weights.base, weights.base_channels))
    for w, b in weights.layers[1:-1]:
        x = ad.tanh(conv2d(upsample2x(x), w, b, stride=1, pad=1))
    w, b = weights.layers[-1]
    return ad.sigmoid(conv2d(x, w, b, stride=1, pad=0))


@dataclass
class InversionResult:
    latent: np.ndarray
    mae: float
    trace: list[float] = field(default_factory=list)


def lr_at(step: int, steps: int, lr: float, schedule: str = "cosine") -> float:
    """Learning rate of update ``step`` out of ``steps``: cosine decay to 0 or constant."""
    if schedule == "constant":
        return lr
    if schedule == "cosine":
        return 0.5 * lr * (1.0 + np.cos(np.pi * step / steps))
    raise ValueError(f"unknown schedule {schedule!r}")


def invert_texture(weights: DecoderWeights, target_uv: np.ndarray, steps: int = 500, lr: float = 0.02,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                   schedule: str = "cosine") -> InversionResult:
    """Adam on the mean absolute UV error, starting from the zero latent.

    ``trace[i]`` is the loss before update ``i``; ``mae`` is the loss at the
    returned latent. A constant rate makes the L1 loss chatter once it is
    small; the cosine default keeps it non-increasing.
    """
    target = np.asarray(target_uv, dtype=np.float64)
    if target.shape != weights.output_shape:
        raise ValueError(f"target shape {target.shape} != decoder output {weights.output_shape}")
    params = {"p_t": np.zeros(weights.latent_dim)}
    state = AdamState()
    trace = []

    def loss_and_grad(p):
        tape = ad.Tape()
        z = tape.leaf(p)
        loss = ad.mean(ad.abs_(ad.sub(generate(weights, z), target)))
        val = loss.item()
        if not np.isfinite(val):
            raise DivergenceError(f"non-finite inversion loss at step {len(trace)}")
        return val, tape.backward(loss, [z])[0]

    if schedule not in ("cosine", "constant"):
        raise ValueError(f"unknown schedule {schedule!r}")
    for step in range(steps):
        val, g = loss_and_grad(params["p_t"])
        trace.append(val)
        params, state = adam_step(params, {"p_t": g}, state, lr_at(step, steps, lr, schedule), beta1, beta2, eps)
    final, _ = loss_and_grad(params["p_t"]) if steps else (float(np.mean(np.abs(
        generate(weights, params["p_t"]).data - target))), None)
    return InversionResult(params["p_t"], final, trace)
