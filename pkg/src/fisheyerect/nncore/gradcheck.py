"""Central finite-difference gradient checks (run in float64)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, float64_mode


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max|n|`` over the whole tensor (absolute if ``n`` is all ~0)."""
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-3,
                    seed: int = 0, params: Sequence[Tensor] = ()) -> float:
    """Worst relative error between backprop and finite differences.

    ``fn`` maps input tensors to a tensor; it is reduced to a scalar by a fixed
    random projection so every output element contributes.  ``params`` are
    extra leaf tensors (layer weights) checked alongside the inputs.
    """
    with float64_mode():
        tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        out = fn(*tensors)
        # salted so the projection never coincides with inputs drawn from the same seed
        proj = np.random.default_rng([seed, 7919]).standard_normal(out.shape)

        def scalar():
            return float(np.sum(fn(*tensors).data * proj))

        loss = (out * Tensor(proj)).sum()
        loss.backward()
        worst = 0.0
        for t in list(tensors) + list(params):
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
            numeric = numeric_grad(scalar, t.data, eps)
            worst = max(worst, relative_error(analytic, numeric))
        return worst
