"""Pure-numpy selective-scan kernel (reference / fallback backend).

The recurrence h_t = exp(dt_t*A) * h_{t-1} + (dt_t*u_t) * B_t is sequential in
t, so the loop is over time only; batch, channel, and state dims stay
vectorized. exp(dt*A) is formed per step instead of materializing the
[B, d, N, L] tensor, and the backward pass recomputes states inside fixed-size
chunks from saved chunk-boundary states, keeping memory at
O(B*d*N*(L/chunk + chunk)).
"""

import numpy as np

CHUNK = 32


def scan_forward(u, dt, A, B_in, C_out, D, chunk=CHUNK):
    """Returns (y, checkpoints); checkpoints[b, d, c] is h just before step c*chunk."""
    Bb, d, L = u.shape
    N = A.shape[1]
    nchk = (L + chunk - 1) // chunk
    y = np.empty((Bb, d, L), dtype=u.dtype)
    chk = np.empty((Bb, d, nchk, N), dtype=u.dtype)
    h = np.zeros((Bb, d, N), dtype=u.dtype)
    for t in range(L):
        if t % chunk == 0:
            chk[:, :, t // chunk, :] = h
        abar = np.exp(dt[:, :, t, None] * A[None, :, :])
        h = abar * h + (dt[:, :, t] * u[:, :, t])[:, :, None] * B_in[:, None, :, t]
        y[:, :, t] = (h * C_out[:, None, :, t]).sum(axis=-1) + D[None, :] * u[:, :, t]
    return y, chk


def scan_backward(u, dt, A, B_in, C_out, D, chk, gy, chunk=CHUNK):
    Bb, d, L = u.shape
    N = A.shape[1]
    gu = np.empty_like(u)
    gdt = np.empty_like(dt)
    gA = np.zeros_like(A)
    gB = np.empty_like(B_in)
    gC = np.empty_like(C_out)
    gD = np.einsum("bdl,bdl->d", gy, u)
    gh = np.zeros((Bb, d, N), dtype=u.dtype)
    nchk = chk.shape[2]
    hs = np.empty((Bb, d, chunk + 1, N), dtype=u.dtype)
    for c in range(nchk - 1, -1, -1):
        t0 = c * chunk
        n = min(L, t0 + chunk) - t0
        hs[:, :, 0, :] = chk[:, :, c, :]
        for i in range(n):
            t = t0 + i
            abar = np.exp(dt[:, :, t, None] * A[None, :, :])
            hs[:, :, i + 1, :] = (
                abar * hs[:, :, i, :]
                + (dt[:, :, t] * u[:, :, t])[:, :, None] * B_in[:, None, :, t]
            )
        for i in range(n - 1, -1, -1):
            t = t0 + i
            h_prev = hs[:, :, i, :]
            gyt = gy[:, :, t]
            gC[:, :, t] = np.einsum("bd,bdn->bn", gyt, hs[:, :, i + 1, :])
            gh += gyt[:, :, None] * C_out[:, None, :, t]
            abar = np.exp(dt[:, :, t, None] * A[None, :, :])
            gh_decay = gh * h_prev * abar
            gA += np.einsum("bdn,bd->dn", gh_decay, dt[:, :, t])
            gB[:, :, t] = np.einsum("bdn,bd->bn", gh, dt[:, :, t] * u[:, :, t])
            gh_b = np.einsum("bdn,bn->bd", gh, B_in[:, :, t])
            gdt[:, :, t] = np.einsum("bdn,dn->bd", gh_decay, A) + gh_b * u[:, :, t]
            gu[:, :, t] = gh_b * dt[:, :, t] + gyt * D[None, :]
            gh *= abar
    return gu, gdt, gA, gB, gC, gD
