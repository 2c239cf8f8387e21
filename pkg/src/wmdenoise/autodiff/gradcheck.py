"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], tensor: Tensor, indices, h: float = 1e-5) -> np.ndarray:
    """d fn() / d tensor[idx] by central differences for each flat index."""
    flat = tensor.data.reshape(-1)
    out = np.empty(len(indices))
    for n, idx in enumerate(indices):
        orig = flat[idx]
        flat[idx] = orig + h
        plus = float(fn().data)
        flat[idx] = orig - h
        minus = float(fn().data)
        flat[idx] = orig
        out[n] = (plus - minus) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a-n| / max(|a|, |n|, floor) elementwise."""
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def check_grad(fn: Callable[[], Tensor], tensors: list[Tensor], n_samples: int = 20,
               rng: Optional[np.random.Generator] = None, h: float = 1e-5) -> float:
    """Largest relative error between autodiff and finite differences.

    ``fn`` must rebuild the graph on every call.  Up to ``n_samples`` entries
    per tensor are probed.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.zero_grad()
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic_all = t.grad.reshape(-1).copy()
        k = min(n_samples, t.size)
        idx = rng.choice(t.size, size=k, replace=False)
        numeric = numerical_grad(fn, t, idx, h)
        worst = max(worst, float(relative_error(analytic_all[idx], numeric).max()))
    return worst
