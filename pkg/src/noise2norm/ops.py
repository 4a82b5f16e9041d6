"""Differentiable tensor operations.

Binary elementwise ops require identical shapes. Broadcasts that the model
needs (per-channel gates, scalar activation slopes) are separate ops with
explicit shape contracts.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError, ShapeError
from .tensor import Tensor, make_result


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------- pointwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return make_result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return make_result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("multiply", a, b)
    x, y = a.data, b.data
    return make_result("multiply", x * y, (a, b), lambda g: (g * y, g * x))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    x, y = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x / y

    def bw(g):
        ga = g / y
        return ga, -ga * out

    return make_result("div", out, (a, b), bw)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_result("scale", x.data * x.dtype.type(s), (x,), lambda g: (g * s,))


def shift(x: Tensor, c: float) -> Tensor:
    return make_result("shift", x.data + x.dtype.type(c), (x,), lambda g: (g,))


def blend(a: Tensor, b: Tensor, lam: float) -> Tensor:
    """(1 - lam) * a + lam * b."""
    _same_shape("blend", a, b)
    lam = float(lam)
    out = (1.0 - lam) * a.data + lam * b.data
    return make_result("blend", out.astype(a.dtype, copy=False), (a, b),
                       lambda g: (g * (1.0 - lam), g * lam))


def square(x: Tensor) -> Tensor:
    d = x.data
    return make_result("square", d * d, (x,), lambda g: (2.0 * g * d,))


def absolute(x: Tensor) -> Tensor:
    d = x.data
    return make_result("abs", np.abs(d), (x,), lambda g: (g * np.sign(d),))


def relu(x: Tensor) -> Tensor:
    d = x.data
    mask = d > 0
    return make_result("relu", d * mask, (x,), lambda g: (g * mask,))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one trainable slope of shape (1, 1, 1, 1)."""
    if slope.shape != (1, 1, 1, 1):
        raise ShapeError(f"prelu slope must be (1, 1, 1, 1), got {slope.shape}")
    d = x.data
    a = slope.data.reshape(())
    pos = d > 0
    out = np.where(pos, d, a * d)

    def bw(g):
        gx = np.where(pos, g, a * g)
        ga = np.sum(np.where(pos, 0.0, g * d), dtype=np.float64).reshape(1, 1, 1, 1)
        return gx, ga.astype(d.dtype)

    return make_result("prelu", out, (x, slope), bw)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = 0.5 * (1.0 + np.tanh(0.5 * d))
    return make_result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def scale_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply each (n, c) plane of ``x`` by ``gate[n, c, 0, 0]``."""
    n, c = x.shape[:2]
    if gate.shape != (n, c, 1, 1):
        raise ShapeError(f"scale_channels: gate {gate.shape} does not match {(n, c, 1, 1)}")
    xd, gd = x.data, gate.data

    def bw(g):
        return g * gd, np.sum(g * xd, axis=(2, 3), keepdims=True)

    return make_result("scale_channels", xd * gd, (x, gate), bw)


# ---------------------------------------------------------------- reductions

def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h * w < 1:
        raise ShapeError("global_avg_pool needs a non-empty spatial extent")
    inv = 1.0 / (h * w)

    def bw(g):
        return (np.broadcast_to(g * inv, x.shape).astype(x.dtype),)

    return make_result("global_avg_pool", x.data.mean(axis=(2, 3), keepdims=True), (x,), bw)


def mean(x: Tensor) -> Tensor:
    """Mean of all elements as a (1, 1, 1, 1) tensor."""
    inv = 1.0 / x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype).reshape(1, 1, 1, 1)

    def bw(g):
        return (np.full(x.shape, g.reshape(()) * inv, dtype=x.dtype),)

    return make_result("mean", out, (x,), bw)


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a (1, 1, 1, 1) tensor."""
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype).reshape(1, 1, 1, 1)

    def bw(g):
        return (np.full(x.shape, g.reshape(()), dtype=x.dtype),)

    return make_result("sum", out, (x,), bw)


def channel_mean(x: Tensor) -> Tensor:
    """Average over the channel axis, keeping it as size 1."""
    c = x.shape[1]

    def bw(g):
        return (np.broadcast_to(g / c, x.shape).astype(x.dtype),)

    return make_result("channel_mean", x.data.mean(axis=1, keepdims=True), (x,), bw)


# ------------------------------------------------------------ channel layout

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    n, _, h, w = xs[0].shape
    for t in xs:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {t.shape} does not match n,h,w of {xs[0].shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return make_result("concat", np.concatenate([t.data for t in xs], axis=1), xs, bw)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"slice_channels: [{start}, {stop}) outside {c} channels")

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return make_result("slice_channels", x.data[:, start:stop].copy(), (x,), bw)


def branch_softmax(x: Tensor, num_branches: int) -> Tensor:
    """Softmax across ``num_branches`` equal channel groups of ``x``.

    ``x`` holds the branches stacked along the channel axis, shape
    (n, K*c, h, w); the result has the same layout and, for every
    (n, channel, position), its K entries sum to one.
    """
    n, kc, h, w = x.shape
    if num_branches < 2:
        raise ShapeError("branch_softmax needs at least two branches")
    if kc % num_branches:
        raise ShapeError(f"{kc} channels do not split into {num_branches} branches")
    z = x.data.reshape(n, num_branches, kc // num_branches, h, w)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        g5 = g.reshape(y.shape)
        gx = y * (g5 - np.sum(g5 * y, axis=1, keepdims=True))
        return (gx.reshape(x.shape),)

    return make_result("branch_softmax", y.reshape(x.shape), (x,), bw)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(n, c*r*r, h, w) -> (n, c, h*r, w*r); channel c*r*r + s*r + t -> offset (s, t)."""
    n, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    co = c // (r * r)
    out = x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)

    def bw(g):
        return (g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return make_result("pixel_shuffle", np.ascontiguousarray(out), (x,), bw)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    n, c, h, w = x.shape
    if r < 1 or h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: {h}x{w} not divisible by r={r}")
    ho, wo = h // r, w // r
    out = x.data.reshape(n, c, ho, r, wo, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, ho, wo)

    def bw(g):
        return (g.reshape(n, c, r, r, ho, wo).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape),)

    return make_result("pixel_unshuffle", np.ascontiguousarray(out), (x,), bw)


# ------------------------------------------------------- separable filtering

def separable_filter(x: Tensor, mat_h: np.ndarray, mat_w: np.ndarray, kind: str = "separable_filter") -> Tensor:
    """y[n, c] = mat_h @ x[n, c] @ mat_w.T for fixed matrices.

    Resizing and boundary-aware Gaussian blurs are both linear maps that act
    on rows and columns independently, so they share this op.
    """
    h, w = x.shape[2:]
    if mat_h.shape[1] != h or mat_w.shape[1] != w:
        raise ShapeError(f"{kind}: matrices {mat_h.shape}, {mat_w.shape} do not fit {h}x{w}")
    mh = mat_h.astype(x.dtype, copy=False)
    mw = mat_w.astype(x.dtype, copy=False)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def bw(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return make_result(kind, out, (x,), bw)


@lru_cache(maxsize=256)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D linear interpolation weights, half-pixel (align_corners=False) convention.

    Output sample i sits at source coordinate (i + 0.5) * n_in / n_out - 0.5,
    clamped to [0, n_in - 1]; this matches the usual framework behaviour for
    bilinear resizing without antialiasing.
    """
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * ratio - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise InvalidArgumentError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return separable_filter(x, np.eye(h), np.eye(w), kind="bilinear_resize")
    return separable_filter(x, resize_matrix(h, out_h), resize_matrix(w, out_w), kind="bilinear_resize")


# --------------------------------------------------------------- convolution

def _pad(d: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return d
    return np.pad(d, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect" if mode == "reflect" else "constant")


def _fold_reflect(g: np.ndarray, p: int, axis: int) -> np.ndarray:
    """Adjoint of reflect padding by ``p`` along ``axis``."""
    g = np.moveaxis(g, axis, -1)
    n = g.shape[-1] - 2 * p
    gx = g[..., p:p + n].copy()
    gx[..., 1:p + 1] += g[..., :p][..., ::-1]
    gx[..., n - 1 - p:n - 1] += g[..., p + n:][..., ::-1]
    return np.moveaxis(gx, -1, axis)


def _unpad_grad(g: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return g
    if mode == "reflect":
        return np.ascontiguousarray(_fold_reflect(_fold_reflect(g, p, 2), p, 3))
    return np.ascontiguousarray(g[:, :, p:-p, p:-p])


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, pad_mode: str = "zero") -> Tensor:
    """2-D cross-correlation with square odd kernels, implemented as im2col + matmul."""
    n, c, h, w = x.shape
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be (c_out, c_in, k, k), got {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {c_in}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if bias is not None and bias.shape != (1, c_out, 1, 1):
        raise ShapeError(f"conv2d: bias must be (1, {c_out}, 1, 1), got {bias.shape}")
    if pad_mode not in ("zero", "reflect"):
        raise InvalidArgumentError(f"unknown pad_mode {pad_mode!r}")
    if pad_mode == "reflect" and padding >= min(h, w):
        raise ShapeError(f"conv2d: reflect padding {padding} needs spatial size > {padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: empty output for input {h}x{w}, kernel {k}, padding {padding}")

    xp = _pad(x.data, padding, pad_mode)
    wm = weight.data.reshape(c_out, c_in * k * k)
    if k == 1 and stride == 1:
        cols = xp.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_in)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * k * k)
    y = cols @ wm.T
    if bias is not None:
        y += bias.data.reshape(1, c_out)
    out = np.ascontiguousarray(y.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gw = (g2.T @ cols).reshape(weight.shape)
        gb = g2.sum(axis=0).reshape(1, c_out, 1, 1) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ wm
            if k == 1 and stride == 1:
                gxp = gcols.reshape(n, ho, wo, c_in).transpose(0, 3, 1, 2)
            else:
                gc = gcols.reshape(n, ho, wo, c_in, k, k).transpose(0, 3, 4, 5, 1, 2)
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gc[:, :, i, j]
            gx = _unpad_grad(gxp, padding, pad_mode)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("conv2d", out, inputs, bw)
