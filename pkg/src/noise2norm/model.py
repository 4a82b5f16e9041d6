"""Multiscale encoder/decoder reconstruction network.

Layout for ``num_scales = L`` and level widths ``w_i = base * 2**i``:

* encoder level i: 3x3 conv + PReLU lifts the scale-i noisy input to ``w_i``
  channels; for i > 0 it is concatenated with the pixel-unshuffled encoder
  output of level i-1 (``4 * w_{i-1}`` channels); a residual attention block
  fuses the result to ``w_i`` channels.
* decoder level L-1: residual attention block on the deepest encoder output.
* decoder level i < L-1: pixel-shuffle the level i+1 decoder state
  (``w_{i+1} / 4`` channels), concatenate the encoder skip, fuse with a
  residual attention block to ``w_i`` channels.
* every decoder level emits a 3-channel reading (1x1 conv); readings are
  bilinearly upsampled to full size and fused by SKFF; a final 3x3 conv
  gives the reconstruction. There is no input-to-output residual.

With ``residual_attention=False`` each residual attention block is replaced
by a single 1x1 convolution with the same input and output widths.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import ops
from .errors import InvalidArgumentError, ShapeError
from .tensor import Tensor, default_dtype

PRELU_INIT = 0.25


@dataclass(frozen=True)
class ModelConfig:
    num_scales: int = 4
    base_channels: int = 16
    kernel_size: int = 3
    in_channels: int = 3
    out_channels: int = 3
    residual_attention: bool = True
    gate_ratio: int = 4
    skff_min_width: int = 4
    pad_mode: str = "reflect"

    def __post_init__(self):
        if self.num_scales < 2:
            raise InvalidArgumentError("num_scales must be >= 2")
        if self.base_channels < 4 or self.base_channels % 4:
            raise InvalidArgumentError("base_channels must be a positive multiple of 4")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidArgumentError("kernel_size must be odd")
        if self.gate_ratio < 1 or self.skff_min_width < 1:
            raise InvalidArgumentError("gate_ratio and skff_min_width must be >= 1")
        if self.pad_mode not in ("zero", "reflect"):
            raise InvalidArgumentError(f"unknown pad_mode {self.pad_mode!r}")

    def width(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def skff_width(self) -> int:
        return max(self.out_channels // self.gate_ratio, self.skff_min_width)


class ParameterSet:
    """Ordered name -> trainable :class:`Tensor` map with stable dotted names."""

    def __init__(self, tensors: "OrderedDict[str, Tensor] | None" = None):
        self._tensors: OrderedDict[str, Tensor] = OrderedDict(tensors or ())

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def add(self, name: str, t: Tensor) -> None:
        if name in self._tensors:
            raise InvalidArgumentError(f"duplicate parameter name {name}")
        t.requires_grad = True
        self._tensors[name] = t

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def num_elements(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def to_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self._tensors.items())

    @classmethod
    def from_arrays(cls, arrays) -> "ParameterSet":
        ps = cls()
        for name, arr in arrays.items():
            ps.add(name, Tensor(np.array(arr)))
        return ps

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet.from_arrays(OrderedDict((k, v.astype(dtype)) for k, v in self.to_arrays().items()))


# ------------------------------------------------------------------ topology

def _ram_layers(prefix: str, c_in: int, c_out: int, cfg: ModelConfig) -> list:
    if not cfg.residual_attention:
        return [("conv", f"{prefix}.adjust", c_in, c_out, 1)]
    k = cfg.kernel_size
    mid = max(c_out // cfg.gate_ratio, 1)
    return [
        ("conv", f"{prefix}.ram.conv", c_in, c_out, k),
        ("slope", f"{prefix}.ram.act"),
        ("conv", f"{prefix}.ram.gate1", c_out, mid, 1),
        ("slope", f"{prefix}.ram.gate_act"),
        ("conv", f"{prefix}.ram.gate2", mid, c_out, 1),
        ("conv", f"{prefix}.ram.shortcut", c_in, c_out, 1),
    ]


def layer_table(cfg: ModelConfig) -> list:
    """Every parameterized layer as (kind, name, c_in, c_out, k) or (kind, name)."""
    L, k = cfg.num_scales, cfg.kernel_size
    layers = []
    for i in range(L):
        w = cfg.width(i)
        layers += [("conv", f"enc.l{i}.shallow", cfg.in_channels, w, k), ("slope", f"enc.l{i}.shallow_act")]
        c_in = w if i == 0 else w + 4 * cfg.width(i - 1)
        layers += _ram_layers(f"enc.l{i}", c_in, w, cfg)
    for i in reversed(range(L)):
        w = cfg.width(i)
        c_in = w if i == L - 1 else w + cfg.width(i + 1) // 4
        layers += _ram_layers(f"dec.l{i}", c_in, w, cfg)
        layers.append(("conv", f"dec.l{i}.out", w, cfg.out_channels, 1))
    c, d = cfg.out_channels, cfg.skff_width
    layers += [("conv", "skff.squeeze", c, d, 1), ("slope", "skff.act")]
    layers += [("conv", f"skff.branch{b}", d, c, 1) for b in range(L)]
    layers.append(("conv", "head", cfg.out_channels, cfg.out_channels, k))
    return layers


def init_bound(name: str, fan_in: int) -> float:
    """Uniform weight bound for one conv layer.

    Layers feeding a PReLU use sqrt(6 / ((1 + a^2) * fan_in)) with a = 0.25.
    Linear read-outs (decoder outputs and the head) use sqrt(3 / fan_in). The
    two summands of a residual attention block are scaled by 1/sqrt(2) so the
    sum keeps the variance of its input.
    """
    if name == "head" or name.endswith(".out"):
        return float(np.sqrt(3.0 / fan_in))
    bound = np.sqrt(6.0 / ((1.0 + PRELU_INIT ** 2) * fan_in))
    if name.endswith(".ram.conv") or name.endswith(".ram.shortcut"):
        bound /= np.sqrt(2.0)
    return float(bound)


def init_model(cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=None) -> ParameterSet:
    """Fan-in scaled uniform weights (see ``init_bound``), zero biases, PReLU slopes 0.25.

    Weights are drawn from a Philox stream in layer-table order.
    """
    dtype = dtype or default_dtype()
    rng = np.random.Generator(np.random.Philox(int(seed)))
    ps = ParameterSet()
    for layer in layer_table(cfg):
        if layer[0] == "slope":
            ps.add(f"{layer[1]}.slope", Tensor(np.full((1, 1, 1, 1), PRELU_INIT, dtype=dtype)))
            continue
        _, name, c_in, c_out, k = layer
        bound = init_bound(name, c_in * k * k)
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
        ps.add(f"{name}.weight", Tensor(w.astype(dtype)))
        ps.add(f"{name}.bias", Tensor(np.zeros((1, c_out, 1, 1), dtype=dtype)))
    return ps


# ------------------------------------------------------------------- blocks

def conv(x: Tensor, params: ParameterSet, name: str, pad_mode: str = "reflect") -> Tensor:
    w = params[f"{name}.weight"]
    return ops.conv2d(x, w, params[f"{name}.bias"], stride=1, padding=w.shape[2] // 2, pad_mode=pad_mode)


def _check_conv(params: ParameterSet, name: str, c_in: int, c_out: int) -> None:
    w = params[f"{name}.weight"]
    if w.shape[:2] != (c_out, c_in):
        raise ShapeError(f"{name}.weight has shape {w.shape}, expected ({c_out}, {c_in}, k, k)")


def residual_attention(x: Tensor, params: ParameterSet, c_out: int, prefix: str = "ram",
                       pad_mode: str = "reflect") -> Tensor:
    """Channel-gated conv path plus 1x1 shortcut; maps ``c_in`` to ``c_out`` channels.

    ``prefix`` addresses parameters ``{prefix}.conv``, ``.act``, ``.gate1``,
    ``.gate_act``, ``.gate2`` and ``.shortcut``.
    """
    c_in = x.shape[1]
    _check_conv(params, f"{prefix}.conv", c_in, c_out)
    _check_conv(params, f"{prefix}.shortcut", c_in, c_out)
    main = ops.prelu(conv(x, params, f"{prefix}.conv", pad_mode), params[f"{prefix}.act.slope"])
    g = ops.global_avg_pool(main)
    g = ops.prelu(conv(g, params, f"{prefix}.gate1"), params[f"{prefix}.gate_act.slope"])
    g = ops.sigmoid(conv(g, params, f"{prefix}.gate2"))
    return ops.add(ops.scale_channels(main, g), conv(x, params, f"{prefix}.shortcut"))


def skff(branches: Sequence[Tensor], params: ParameterSet, prefix: str = "skff") -> Tensor:
    """Selective kernel feature fusion of same-shape branches."""
    branches = list(branches)
    if len(branches) < 2:
        raise ShapeError("skff needs at least two branches")
    shape = branches[0].shape
    for b in branches:
        if b.shape != shape:
            raise ShapeError(f"skff branch shapes differ: {b.shape} vs {shape}")
    c = shape[1]
    s = branches[0]
    for b in branches[1:]:
        s = ops.add(s, b)
    z = ops.prelu(conv(ops.global_avg_pool(s), params, f"{prefix}.squeeze"), params[f"{prefix}.act.slope"])
    logits = ops.concat_channels([conv(z, params, f"{prefix}.branch{k}") for k in range(len(branches))])
    weights = ops.branch_softmax(logits, len(branches))
    out = None
    for k, b in enumerate(branches):
        term = ops.scale_channels(b, ops.slice_channels(weights, k * c, (k + 1) * c))
        out = term if out is None else ops.add(out, term)
    return out


def _fuse(x: Tensor, params: ParameterSet, prefix: str, c_out: int, cfg: ModelConfig) -> Tensor:
    if cfg.residual_attention:
        return residual_attention(x, params, c_out, f"{prefix}.ram", cfg.pad_mode)
    _check_conv(params, f"{prefix}.adjust", x.shape[1], c_out)
    return conv(x, params, f"{prefix}.adjust")


def mnet_forward(multiscale_inputs: Sequence[Tensor], params: ParameterSet, cfg: ModelConfig = ModelConfig()) -> Tensor:
    L = cfg.num_scales
    xs = list(multiscale_inputs)
    if len(xs) != L:
        raise ShapeError(f"expected {L} input scales, got {len(xs)}")
    n, _, h, w = xs[0].shape
    if h % 2 ** (L - 1) or w % 2 ** (L - 1):
        raise ShapeError(f"{h}x{w} input is not divisible by {2 ** (L - 1)}")
    for i, x in enumerate(xs):
        want = (n, cfg.in_channels, h >> i, w >> i)
        if x.shape != want:
            raise ShapeError(f"input scale {i} has shape {x.shape}, expected {want}")

    enc = []
    for i in range(L):
        f = ops.prelu(conv(xs[i], params, f"enc.l{i}.shallow", cfg.pad_mode), params[f"enc.l{i}.shallow_act.slope"])
        if i > 0:
            f = ops.concat_channels([f, ops.pixel_unshuffle(enc[-1], 2)])
        enc.append(_fuse(f, params, f"enc.l{i}", cfg.width(i), cfg))

    readings = [None] * L
    d = None
    for i in reversed(range(L)):
        if d is None:
            d = _fuse(enc[i], params, f"dec.l{i}", cfg.width(i), cfg)
        else:
            d = _fuse(ops.concat_channels([ops.pixel_shuffle(d, 2), enc[i]]), params, f"dec.l{i}", cfg.width(i), cfg)
        r = conv(d, params, f"dec.l{i}.out")
        readings[i] = r if i == 0 else ops.bilinear_resize(r, h, w)

    return conv(skff(readings, params), params, "head", cfg.pad_mode)


def validate_parameters(params: ParameterSet, cfg: ModelConfig) -> None:
    """Raise ShapeError naming the first parameter that does not fit ``cfg``."""
    expected = init_model_shapes(cfg)
    for name, shape in expected.items():
        if name not in params:
            raise ShapeError(f"parameter {name} missing for this model configuration")
        if params[name].shape != shape:
            raise ShapeError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
    extra = [k for k in params if k not in expected]
    if extra:
        raise ShapeError(f"parameter {extra[0]} is not part of this model configuration")


def init_model_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    shapes = OrderedDict()
    for layer in layer_table(cfg):
        if layer[0] == "slope":
            shapes[f"{layer[1]}.slope"] = (1, 1, 1, 1)
        else:
            _, name, c_in, c_out, k = layer
            shapes[f"{name}.weight"] = (c_out, c_in, k, k)
            shapes[f"{name}.bias"] = (1, c_out, 1, 1)
    return shapes
