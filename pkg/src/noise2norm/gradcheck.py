"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .tensor import Tensor, backward, clear_graph, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-4,
                      num_coords: int = 64, seed: int = 0, floor: float = 1e-8) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` maps ``inputs`` to a (1, 1, 1, 1) tensor. A random subsample of at
    least ``num_coords`` coordinates (all of them if there are fewer) is drawn
    across every input; each is perturbed by +/- ``step`` in place and
    restored. Run under ``precision(np.float64)`` for meaningful results.
    """
    if not step > 0:
        raise InvalidArgumentError(f"step must be > 0, got {step}")
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    clear_graph()
    out = f(*inputs)
    backward(out)
    analytic_all = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    sizes = np.array([t.data.size for t in inputs])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if total <= num_coords else np.sort(rng.choice(total, size=max(num_coords, 64), replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    analytic, numeric = [], []
    with no_grad():
        for flat in picks:
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = int(flat - offsets[which])
            buf = inputs[which].data.reshape(-1)
            orig = buf[idx]
            buf[idx] = orig + step
            plus = f(*inputs).item()
            buf[idx] = orig - step
            minus = f(*inputs).item()
            buf[idx] = orig
            numeric.append((plus - minus) / (2 * step))
            analytic.append(analytic_all[which].reshape(-1)[idx])
    return float(relative_error(np.array(analytic), np.array(numeric), floor).max())
