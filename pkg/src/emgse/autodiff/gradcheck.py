"""Finite-difference verification of backward rules.

Central differences with step h on each input element, compared against the
analytic gradient from one backward pass. Meant to run in float64; float32
rounding would swamp the tolerance.
"""

import numpy as np

from .tensor import no_grad


def numeric_gradient(f, tensors, index, h=1e-5):
    """Central-difference gradient of scalar f(*tensors) wrt tensors[index]."""
    x = tensors[index]
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*tensors).data)
            flat[i] = orig - h
            fm = float(f(*tensors).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(f, tensors, h=1e-5, tol=1e-4):
    """Return the worst relative error across all differentiable inputs.

    f must map the given tensors to a scalar. Raises AssertionError when the
    analytic/numeric mismatch exceeds tol.
    """
    for t in tensors:
        t.grad = None
    out = f(*tensors)
    if out.size != 1:
        raise ValueError("gradient check target must be scalar")
    out.backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        num = numeric_gradient(f, tensors, i, h=h)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        err = max_rel_error(ana, num)
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(f"gradient mismatch on input {i}: rel err {err:.3e} > {tol:g}")
    return worst
