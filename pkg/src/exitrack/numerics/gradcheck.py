"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, probe: np.ndarray | float = 1.0,
                 step: float = 1e-4) -> np.ndarray:
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float((fn().data * probe).sum())
        flat[i] = orig - step
        lo = float((fn().data * probe).sum())
        flat[i] = orig
        out[i] = (hi - lo) / (2 * step)
    return out.reshape(x.shape)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-4,
                    seed: int = 0) -> list[float]:
    """Relative error per input between ``backward`` and central differences.

    ``fn`` must rebuild the graph from the current contents of ``inputs``.
    Non-scalar outputs are contracted with a fixed random probe so that
    shift-invariant ops (softmax, layer norm) still get a non-trivial check.
    Inputs should be float64.
    """
    for x in inputs:
        if x.dtype != np.float64:
            raise TypeError("gradient checks need float64 inputs")
        x.grad = None
    out = fn()
    if out.size == 1:
        probe: np.ndarray | float = 1.0
        loss = out.sum()
    else:
        probe = np.random.default_rng(seed).standard_normal(out.shape)
        loss = (out * Tensor(probe)).sum()
    loss.backward()
    analytic = [np.zeros(x.shape) if x.grad is None else x.grad.copy() for x in inputs]
    return [relative_error(a, numeric_grad(fn, x, probe, step)) for a, x in zip(analytic, inputs)]
