"""Image normalization, Gaussian noise blending and multiscale inputs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import InvalidArgumentError, ShapeError
from .ops import bilinear_resize
from .tensor import Tensor, randn

Scalars = Union[float, Sequence[float]]

NOISE_SPACES = ("raw", "normalized-literal")


@dataclass(frozen=True)
class NoiseConfig:
    """Noise blending settings.

    ``lam`` is the blend weight of the noise. ``lam == 0`` disables noise
    entirely, which is how the no-noise ablation is expressed.

    With ``noise_space="raw"`` the noise N(noise_mean, noise_std**2) is blended
    with the raw [0, 1] image and the result is normalized. Since
    normalization is affine this equals blending the normalized image with
    standard-normal noise. ``"normalized-literal"`` instead blends the
    N(noise_mean, noise_std**2) samples directly with the normalized image.
    """

    lam: float = 0.3
    noise_mean: float = 0.5
    noise_std: float = 0.5
    norm_mean: Scalars = 0.5
    norm_std: Scalars = 0.5
    inference_draws: int = 1
    noise_space: str = "raw"

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise InvalidArgumentError(f"noise lambda must lie in [0, 1), got {self.lam}")
        if not self.noise_std > 0:
            raise InvalidArgumentError(f"noise_std must be > 0, got {self.noise_std}")
        if np.any(np.asarray(self.norm_std, dtype=float) <= 0):
            raise InvalidArgumentError(f"norm_std must be > 0, got {self.norm_std}")
        if int(self.inference_draws) < 1:
            raise InvalidArgumentError("inference_draws must be >= 1")
        if self.noise_space not in NOISE_SPACES:
            raise InvalidArgumentError(f"noise_space must be one of {NOISE_SPACES}, got {self.noise_space!r}")


def _channel_param(value: Scalars, channels: int, dtype) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    if arr.size == 1:
        arr = np.repeat(arr, channels)
    if arr.size != channels:
        raise ShapeError(f"{arr.size} per-channel values for {channels} channels")
    return arr.reshape(1, channels, 1, 1).astype(dtype)


def normalize(img_raw: Tensor, cfg: NoiseConfig) -> Tensor:
    c = img_raw.shape[1]
    m = _channel_param(cfg.norm_mean, c, img_raw.dtype)
    s = _channel_param(cfg.norm_std, c, img_raw.dtype)
    return Tensor((img_raw.data - m) / s)


def denormalize(x: Tensor, cfg: NoiseConfig, clamp: bool = False) -> Tensor:
    """Inverse of :func:`normalize`. ``clamp`` is meant for image export only."""
    c = x.shape[1]
    m = _channel_param(cfg.norm_mean, c, x.dtype)
    s = _channel_param(cfg.norm_std, c, x.dtype)
    out = x.data * s + m
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return Tensor(out)


def sample_noise(shape, cfg: NoiseConfig, seed: int, dtype=None) -> Tensor:
    return randn(shape, cfg.noise_mean, cfg.noise_std, seed, dtype=dtype)


def inject_noise(img_raw: Tensor, cfg: NoiseConfig, seed: int) -> tuple[Tensor, Tensor]:
    """Return ``(x0, x_noisy)``, both in normalized coordinates.

    One independent Gaussian sample per element, drawn from a stream keyed by
    ``seed``. ``img_raw`` is left untouched.
    """
    x0 = normalize(img_raw, cfg)
    if cfg.lam == 0.0:
        return x0, Tensor(x0.data.copy())
    eps = sample_noise(img_raw.shape, cfg, seed, dtype=img_raw.dtype)
    lam = cfg.lam
    if cfg.noise_space == "raw":
        blended = Tensor((1.0 - lam) * img_raw.data + lam * eps.data)
        return x0, normalize(blended, cfg)
    return x0, Tensor((1.0 - lam) * x0.data + lam * eps.data)


def make_multiscale(x_noisy: Tensor, num_scales: int) -> list[Tensor]:
    """Scale ``i`` is ``x_noisy`` bilinearly resized by 1 / 2**i; scale 0 is the input."""
    if num_scales < 1:
        raise InvalidArgumentError("num_scales must be >= 1")
    h, w = x_noisy.shape[2:]
    f = 2 ** (num_scales - 1)
    if h % f or w % f:
        raise ShapeError(f"{h}x{w} input is not divisible by {f} for {num_scales} scales")
    out = [x_noisy]
    for i in range(1, num_scales):
        out.append(bilinear_resize(x_noisy, h >> i, w >> i))
    return out
