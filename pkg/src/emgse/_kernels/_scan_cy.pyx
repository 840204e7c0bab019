# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled selective-scan kernel.

Same contract as scan_numpy: fused exp(dt*A) per step, chunked state
checkpoints for the backward recomputation. Specialized for float32 and
float64 via a fused type; math stays in the storage precision so results
track the numpy backend.
"""

import numpy as np

from cython cimport floating
from libc.math cimport exp, expf


cdef inline floating _exp(floating x) noexcept nogil:
    if floating is float:
        return expf(x)
    else:
        return exp(x)


def scan_forward(floating[:, :, ::1] u, floating[:, :, ::1] dt,
                 floating[:, ::1] A, floating[:, :, ::1] B_in,
                 floating[:, :, ::1] C_out, floating[::1] D, int chunk):
    cdef Py_ssize_t Bb = u.shape[0], dd = u.shape[1], L = u.shape[2]
    cdef Py_ssize_t N = A.shape[1]
    cdef Py_ssize_t nchk = (L + chunk - 1) // chunk
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((Bb, dd, L), dtype=dtype)
    chk_arr = np.empty((Bb, dd, nchk, N), dtype=dtype)
    h_arr = np.empty(N, dtype=dtype)
    cdef floating[:, :, ::1] y = y_arr
    cdef floating[:, :, :, ::1] chk = chk_arr
    cdef floating[::1] h = h_arr
    cdef Py_ssize_t b, d, t, n
    cdef floating du, acc, dtv

    with nogil:
        for b in range(Bb):
            for d in range(dd):
                for n in range(N):
                    h[n] = 0.0
                for t in range(L):
                    if t % chunk == 0:
                        for n in range(N):
                            chk[b, d, t // chunk, n] = h[n]
                    dtv = dt[b, d, t]
                    du = dtv * u[b, d, t]
                    acc = 0.0
                    for n in range(N):
                        h[n] = _exp(dtv * A[d, n]) * h[n] + du * B_in[b, n, t]
                        acc += h[n] * C_out[b, n, t]
                    y[b, d, t] = acc + D[d] * u[b, d, t]
    return y_arr, chk_arr


def scan_backward(floating[:, :, ::1] u, floating[:, :, ::1] dt,
                  floating[:, ::1] A, floating[:, :, ::1] B_in,
                  floating[:, :, ::1] C_out, floating[::1] D,
                  floating[:, :, :, ::1] chk, floating[:, :, ::1] gy, int chunk):
    cdef Py_ssize_t Bb = u.shape[0], dd = u.shape[1], L = u.shape[2]
    cdef Py_ssize_t N = A.shape[1]
    cdef Py_ssize_t nchk = chk.shape[2]
    dtype = np.float32 if floating is float else np.float64
    gu_arr = np.empty((Bb, dd, L), dtype=dtype)
    gdt_arr = np.empty((Bb, dd, L), dtype=dtype)
    gA_arr = np.zeros((dd, N), dtype=dtype)
    gB_arr = np.zeros((Bb, N, L), dtype=dtype)
    gC_arr = np.zeros((Bb, N, L), dtype=dtype)
    gD_arr = np.zeros(dd, dtype=dtype)
    gh_arr = np.empty(N, dtype=dtype)
    hs_arr = np.empty((chunk + 1, N), dtype=dtype)
    cdef floating[:, :, ::1] gu = gu_arr
    cdef floating[:, :, ::1] gdt = gdt_arr
    cdef floating[:, ::1] gA = gA_arr
    cdef floating[:, :, ::1] gB = gB_arr
    cdef floating[:, :, ::1] gC = gC_arr
    cdef floating[::1] gD = gD_arr
    cdef floating[::1] gh = gh_arr
    cdef floating[:, ::1] hs = hs_arr
    cdef Py_ssize_t b, d, t, n, c, i, span
    cdef Py_ssize_t t0
    cdef floating dtv, du, gyt, abar, ghd, gdt_acc, ghb

    with nogil:
        for b in range(Bb):
            for d in range(dd):
                for n in range(N):
                    gh[n] = 0.0
                for c in range(nchk - 1, -1, -1):
                    t0 = c * chunk
                    span = L - t0
                    if span > chunk:
                        span = chunk
                    for n in range(N):
                        hs[0, n] = chk[b, d, c, n]
                    for i in range(span):
                        t = t0 + i
                        dtv = dt[b, d, t]
                        du = dtv * u[b, d, t]
                        for n in range(N):
                            hs[i + 1, n] = _exp(dtv * A[d, n]) * hs[i, n] + du * B_in[b, n, t]
                    for i in range(span - 1, -1, -1):
                        t = t0 + i
                        dtv = dt[b, d, t]
                        du = dtv * u[b, d, t]
                        gyt = gy[b, d, t]
                        gD[d] += gyt * u[b, d, t]
                        gdt_acc = 0.0
                        ghb = 0.0
                        for n in range(N):
                            gC[b, n, t] += gyt * hs[i + 1, n]
                            gh[n] += gyt * C_out[b, n, t]
                            abar = _exp(dtv * A[d, n])
                            ghd = gh[n] * hs[i, n] * abar
                            gA[d, n] += ghd * dtv
                            gB[b, n, t] += gh[n] * du
                            gdt_acc += ghd * A[d, n]
                            ghb += gh[n] * B_in[b, n, t]
                            gh[n] *= abar
                        gdt[b, d, t] = gdt_acc + ghb * u[b, d, t]
                        gu[b, d, t] = ghb * dtv + gyt * D[d]
    return gu_arr, gdt_arr, gA_arr, gB_arr, gC_arr, gD_arr
