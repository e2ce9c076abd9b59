"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, backward


def finite_difference_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Compare f's analytic gradient at x against central differences.

    `f` maps a Tensor to a scalar Tensor and may close over other (fixed)
    tensors. Returns the max over coordinates of
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

    Inputs must be float64; the caller is responsible for keeping x away
    from kinks (relu / max-pool ties) by more than eps.
    """
    if x.data.dtype != np.float64:
        raise ValueError("finite_difference_check: input must be float64")

    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("finite_difference_check: function must return a scalar Tensor")
    backward(out)
    analytic = (np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad).ravel()

    numeric = np.empty_like(analytic)
    flat = x.data.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += eps
        fp = f(Tensor(xp.reshape(x.data.shape))).item()
        xm = flat.copy()
        xm[i] -= eps
        fm = f(Tensor(xm.reshape(x.data.shape))).item()
        numeric[i] = (fp - fm) / (2.0 * eps)

    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0
