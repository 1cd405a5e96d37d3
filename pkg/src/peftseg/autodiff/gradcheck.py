"""Central-difference verification of backward rules.

The analytic gradient is evaluated at the point's own precision; the
difference oracle always runs in float64 (numpy promotion carries float64
probe inputs through float32 parameters), so the reported error measures the
backward rule rather than cancellation noise in the probe.
"""

from __future__ import annotations

import numpy as np

from ..errors import GradCheckError, ShapeError
from .tensor import Tensor, backward


def grad_check(f, point: Tensor, eps: float = 1e-4) -> float:
    """Max over coordinates of |analytic - central| / max(1, |central|).

    ``f`` must map one tensor to a scalar tensor and be deterministic across
    calls (stochastic primitives must carry a fixed seed attribute).
    """
    if eps <= 0:
        raise ShapeError(f"grad_check: eps must be positive, got {eps}")
    x = Tensor(point.data.copy(), requires_grad=True, dtype=point.dtype)
    out = f(x)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    grads = backward(out)
    analytic = grads.get(x)
    if analytic is None:
        analytic = np.zeros_like(x.data)

    base = x.data.astype(np.float64).reshape(-1)
    numeric = np.zeros(base.size, dtype=np.float64)
    for i in range(base.size):
        plus = base.copy()
        plus[i] += eps
        minus = base.copy()
        minus[i] -= eps
        f_plus = f(Tensor(plus.reshape(point.shape), dtype=np.float64)).item()
        f_minus = f(Tensor(minus.reshape(point.shape), dtype=np.float64)).item()
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise GradCheckError(f"non-finite value while probing coordinate {i}")
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    a = analytic.astype(np.float64).reshape(-1)
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(a - numeric) / denom))
