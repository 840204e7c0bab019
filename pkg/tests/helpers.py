"""Shared reference implementations (oracles) used across test modules."""

import numpy as np


def naive_scan(u, dt, A, B_in, C_out, D):
    """Direct per-element sequential evaluation of the SSM recurrence."""
    Bb, dd, L = u.shape
    N = A.shape[1]
    y = np.zeros_like(u)
    for b in range(Bb):
        for d in range(dd):
            h = np.zeros(N, dtype=u.dtype)
            for t in range(L):
                h = np.exp(dt[b, d, t] * A[d]) * h + dt[b, d, t] * u[b, d, t] * B_in[b, :, t]
                y[b, d, t] = h @ C_out[b, :, t] + D[d] * u[b, d, t]
    return y


def random_scan_args(rng, Bb, dd, L, N, dtype=np.float64):
    u = rng.normal(size=(Bb, dd, L)).astype(dtype)
    dt = rng.uniform(0.05, 1.5, size=(Bb, dd, L)).astype(dtype)
    A = -rng.uniform(0.1, 3.0, size=(dd, N)).astype(dtype)
    B_in = rng.normal(size=(Bb, N, L)).astype(dtype)
    C_out = rng.normal(size=(Bb, N, L)).astype(dtype)
    D = rng.normal(size=dd).astype(dtype)
    return u, dt, A, B_in, C_out, D
