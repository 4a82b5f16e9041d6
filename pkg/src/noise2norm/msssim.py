"""Gaussian-window SSIM, multi-filter MS-SSIM, training losses and anomaly maps.

All Gaussian windows use reflect boundary handling. They are applied as
dense row/column matrices (see :func:`noise2norm.ops.separable_filter`), which
keeps every blur a single differentiable op even when the kernel is wider
than the image.

Multi-channel inputs: the window statistics, ``l`` and ``cs`` are computed
per channel; maps are averaged over channels only after the per-channel
product has been formed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import ops
from .errors import InvalidArgumentError, ShapeError
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class SsimParams:
    sigmas: Sequence[float] = (0.5, 1.0, 2.0, 4.0, 8.0)
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 2.0

    def __post_init__(self):
        sig = tuple(float(s) for s in self.sigmas)
        object.__setattr__(self, "sigmas", sig)
        if not sig or any(s <= 0 for s in sig):
            raise InvalidArgumentError(f"sigmas must be positive, got {sig}")
        if any(b <= a for a, b in zip(sig, sig[1:])):
            raise InvalidArgumentError(f"sigmas must be strictly increasing, got {sig}")
        if self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise InvalidArgumentError("k1, k2 and dynamic_range must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


@dataclass(frozen=True)
class LossConfig:
    """``alpha`` weighs MS-SSIM against the blurred L1 term.

    ``smooth_sigma`` is the anomaly-map smoothing width in pixels; ``None``
    means 4 px per 64 px of image width.
    """

    alpha: float = 0.84
    smooth_sigma: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidArgumentError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.smooth_sigma is not None and self.smooth_sigma < 0:
            raise InvalidArgumentError("smooth_sigma must be >= 0")

    def smoothing_for(self, width: int) -> float:
        return 4.0 * width / 64.0 if self.smooth_sigma is None else float(self.smooth_sigma)


@dataclass
class AnomalyMap:
    """Per-pixel anomaly scores for one image; ``score`` is the image-level value."""

    pixels: np.ndarray

    @property
    def score(self) -> float:
        return float(np.max(self.pixels))


def kernel_radius(sigma: float) -> int:
    return int(math.ceil(3.0 * sigma))


@lru_cache(maxsize=64)
def _gaussian_1d(sigma: float) -> np.ndarray:
    r = kernel_radius(sigma)
    t = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian window of size (2r + 1) with r = ceil(3 * sigma)."""
    if not sigma > 0:
        raise InvalidArgumentError(f"sigma must be > 0, got {sigma}")
    g = _gaussian_1d(float(sigma))
    k = np.outer(g, g)
    return k / k.sum()


@lru_cache(maxsize=256)
def blur_matrix(n: int, sigma: float) -> np.ndarray:
    """(n, n) matrix applying the 1-D Gaussian with reflect boundaries."""
    g = _gaussian_1d(float(sigma))
    r = len(g) // 2
    src = np.pad(np.arange(n), r, mode="reflect") if n > 1 else np.zeros(n + 2 * r, dtype=int)
    m = np.zeros((n, n))
    rows = np.repeat(np.arange(n), len(g))
    cols = np.stack([src[i:i + len(g)] for i in range(n)]).reshape(-1)
    np.add.at(m, (rows, cols), np.tile(g, n))
    m.setflags(write=False)
    return m


def gaussian_filter(x: Tensor, sigma: float) -> Tensor:
    if not sigma > 0:
        raise InvalidArgumentError(f"sigma must be > 0, got {sigma}")
    h, w = x.shape[2:]
    return ops.separable_filter(x, blur_matrix(h, float(sigma)), blur_matrix(w, float(sigma)),
                                kind="gaussian_filter")


def _check_pair(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"image pair shape mismatch {x.shape} vs {y.shape}")


def _window_stats(x: Tensor, y: Tensor, sigma: float):
    c = x.shape[1]
    stacked = ops.concat_channels([x, y, ops.square(x), ops.square(y), ops.mul(x, y)])
    f = gaussian_filter(stacked, sigma)
    return [ops.slice_channels(f, i * c, (i + 1) * c) for i in range(5)]


def _luminance(mu_x: Tensor, mu_y: Tensor, c1: float) -> Tensor:
    num = ops.shift(ops.scale(ops.mul(mu_x, mu_y), 2.0), c1)
    den = ops.shift(ops.add(ops.square(mu_x), ops.square(mu_y)), c1)
    return ops.div(num, den)


def _contrast_structure(mu_x, mu_y, ex2, ey2, exy, c2: float) -> Tensor:
    var_x = ops.sub(ex2, ops.square(mu_x))
    var_y = ops.sub(ey2, ops.square(mu_y))
    cov = ops.sub(exy, ops.mul(mu_x, mu_y))
    return ops.div(ops.shift(ops.scale(cov, 2.0), c2), ops.shift(ops.add(var_x, var_y), c2))


def ssim_components(x: Tensor, y: Tensor, sigma: float, p: SsimParams = SsimParams()) -> tuple[Tensor, Tensor]:
    """Per-channel luminance map ``l`` and contrast-structure map ``cs``."""
    _check_pair(x, y)
    mu_x, mu_y, ex2, ey2, exy = _window_stats(x, y, sigma)
    return _luminance(mu_x, mu_y, p.c1), _contrast_structure(mu_x, mu_y, ex2, ey2, exy, p.c2)


def ssim_map(x: Tensor, y: Tensor, sigma: float, p: SsimParams = SsimParams()) -> Tensor:
    l, cs = ssim_components(x, y, sigma, p)
    return ops.channel_mean(ops.mul(l, cs))


def ms_ssim_map(x: Tensor, y: Tensor, p: SsimParams = SsimParams()) -> Tensor:
    """l at the widest Gaussian times cs at every Gaussian; shape (n, 1, h, w)."""
    _check_pair(x, y)
    prod = None
    for j, sigma in enumerate(p.sigmas):
        mu_x, mu_y, ex2, ey2, exy = _window_stats(x, y, sigma)
        cs = _contrast_structure(mu_x, mu_y, ex2, ey2, exy, p.c2)
        prod = cs if prod is None else ops.mul(prod, cs)
        if j == len(p.sigmas) - 1:
            prod = ops.mul(prod, _luminance(mu_x, mu_y, p.c1))
    return ops.channel_mean(prod)


def ms_ssim_loss(x: Tensor, y: Tensor, p: SsimParams = SsimParams()) -> Tensor:
    """Mean over pixels of 1 - MS-SSIM."""
    return ops.shift(ops.scale(ops.mean(ms_ssim_map(x, y, p)), -1.0), 1.0)


def blurred_l1_map(x: Tensor, y: Tensor, p: SsimParams = SsimParams()) -> Tensor:
    """|x - y| blurred by the widest Gaussian, channel-averaged."""
    _check_pair(x, y)
    return ops.channel_mean(gaussian_filter(ops.absolute(ops.sub(x, y)), p.sigmas[-1]))


def blurred_l1_loss(x: Tensor, y: Tensor, p: SsimParams = SsimParams()) -> Tensor:
    return ops.mean(blurred_l1_map(x, y, p))


def mix_loss(x: Tensor, y: Tensor, p: SsimParams = SsimParams(), cfg: LossConfig = LossConfig()) -> Tensor:
    a = cfg.alpha
    if a == 1.0:
        return ms_ssim_loss(x, y, p)
    if a == 0.0:
        return blurred_l1_loss(x, y, p)
    return ops.add(ops.scale(ms_ssim_loss(x, y, p), a), ops.scale(blurred_l1_loss(x, y, p), 1.0 - a))


def anomaly_map_batch(original_x0: Tensor, reconstruction: Tensor, p: SsimParams = SsimParams(),
                      cfg: LossConfig = LossConfig(), smooth_sigma: float | None = None) -> np.ndarray:
    """Per-pixel anomaly scores, shape (n, h, w)."""
    _check_pair(original_x0, reconstruction)
    if smooth_sigma is None:
        smooth_sigma = cfg.smoothing_for(original_x0.shape[3])
    a = cfg.alpha
    with no_grad():
        ssim_term = ops.shift(ops.scale(ms_ssim_map(original_x0, reconstruction, p), -1.0), 1.0)
        s = ops.scale(ssim_term, a)
        if a < 1.0:
            s = ops.add(s, ops.scale(blurred_l1_map(original_x0, reconstruction, p), 1.0 - a))
        if smooth_sigma > 0:
            s = gaussian_filter(s, smooth_sigma)
    return s.data[:, 0]


def anomaly_map(original_x0: Tensor, reconstruction: Tensor, p: SsimParams = SsimParams(),
                cfg: LossConfig = LossConfig(), smooth_sigma: float | None = None) -> list[AnomalyMap]:
    """One :class:`AnomalyMap` per image in the batch."""
    return [AnomalyMap(m) for m in anomaly_map_batch(original_x0, reconstruction, p, cfg, smooth_sigma)]
