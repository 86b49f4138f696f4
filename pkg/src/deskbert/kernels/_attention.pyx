# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled attention kernels over packed sequences.

Banded and global scaled-dot-product attention with native loops; windowed
layers only ever touch the allowed |i - j| <= half_window band, so memory
stays linear in sequence length. Softmax statistics (log-sum-exp per row)
are returned by the forward pass and the backward pass recomputes the
probabilities from them instead of storing score matrices.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

ctypedef fused floating:
    float
    double


def attend_fwd(floating[:, :, ::1] q, floating[:, :, ::1] k, floating[:, :, ::1] v,
               cnp.int64_t[::1] cu_seqlens, Py_ssize_t half_window, double scale):
    """Returns (out, lse); half_window < 0 means global attention."""
    cdef Py_ssize_t T = q.shape[0]
    cdef Py_ssize_t H = q.shape[1]
    cdef Py_ssize_t D = q.shape[2]
    cdef Py_ssize_t nseq = cu_seqlens.shape[0] - 1

    if floating is double:
        dtype = np.float64
    else:
        dtype = np.float32
    out_arr = np.empty((T, H, D), dtype=dtype)
    lse_arr = np.empty((T, H), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef floating[:, ::1] lse = lse_arr

    cdef Py_ssize_t max_n = 0, si
    for si in range(nseq):
        if cu_seqlens[si + 1] - cu_seqlens[si] > max_n:
            max_n = cu_seqlens[si + 1] - cu_seqlens[si]
    buf_arr = np.empty(max_n, dtype=np.float64)
    acc_arr = np.empty(D, dtype=np.float64)
    cdef double[::1] buf = buf_arr
    cdef double[::1] acc = acc_arr

    cdef Py_ssize_t s, n, h, i, j, d, lo, hi
    cdef double m, z, sdot, p

    with nogil:
        for si in range(nseq):
            s = cu_seqlens[si]
            n = cu_seqlens[si + 1] - s
            for h in range(H):
                for i in range(n):
                    if half_window >= 0:
                        lo = i - half_window
                        if lo < 0:
                            lo = 0
                        hi = i + half_window
                        if hi > n - 1:
                            hi = n - 1
                    else:
                        lo = 0
                        hi = n - 1
                    m = -1e308
                    for j in range(lo, hi + 1):
                        sdot = 0.0
                        for d in range(D):
                            sdot += q[s + i, h, d] * k[s + j, h, d]
                        sdot *= scale
                        buf[j - lo] = sdot
                        if sdot > m:
                            m = sdot
                    z = 0.0
                    for j in range(lo, hi + 1):
                        p = exp(buf[j - lo] - m)
                        buf[j - lo] = p
                        z += p
                    for d in range(D):
                        acc[d] = 0.0
                    for j in range(lo, hi + 1):
                        p = buf[j - lo] / z
                        for d in range(D):
                            acc[d] += p * v[s + j, h, d]
                    for d in range(D):
                        out[s + i, h, d] = <floating> acc[d]
                    lse[s + i, h] = <floating> (m + log(z))
    return out_arr, lse_arr


def attend_bwd(floating[:, :, ::1] q, floating[:, :, ::1] k, floating[:, :, ::1] v,
               floating[:, :, ::1] out, floating[:, :, ::1] d_out,
               floating[:, ::1] lse, cnp.int64_t[::1] cu_seqlens,
               Py_ssize_t half_window, double scale):
    """Returns (dq, dk, dv), rebuilding probabilities from the stored lse."""
    cdef Py_ssize_t T = q.shape[0]
    cdef Py_ssize_t H = q.shape[1]
    cdef Py_ssize_t D = q.shape[2]
    cdef Py_ssize_t nseq = cu_seqlens.shape[0] - 1

    if floating is double:
        dtype = np.float64
    else:
        dtype = np.float32
    dq_arr = np.zeros((T, H, D), dtype=dtype)
    dk_arr = np.zeros((T, H, D), dtype=dtype)
    dv_arr = np.zeros((T, H, D), dtype=dtype)
    cdef floating[:, :, ::1] dq = dq_arr
    cdef floating[:, :, ::1] dk = dk_arr
    cdef floating[:, :, ::1] dv = dv_arr

    acc_arr = np.empty(D, dtype=np.float64)
    cdef double[::1] acc = acc_arr

    cdef Py_ssize_t s, n, h, i, j, d, lo, hi, si
    cdef double sdot, p, dp, ds, delta, row_lse

    with nogil:
        for si in range(nseq):
            s = cu_seqlens[si]
            n = cu_seqlens[si + 1] - s
            for h in range(H):
                for i in range(n):
                    if half_window >= 0:
                        lo = i - half_window
                        if lo < 0:
                            lo = 0
                        hi = i + half_window
                        if hi > n - 1:
                            hi = n - 1
                    else:
                        lo = 0
                        hi = n - 1
                    delta = 0.0
                    for d in range(D):
                        delta += out[s + i, h, d] * d_out[s + i, h, d]
                    row_lse = lse[s + i, h]
                    for d in range(D):
                        acc[d] = 0.0
                    for j in range(lo, hi + 1):
                        sdot = 0.0
                        for d in range(D):
                            sdot += q[s + i, h, d] * k[s + j, h, d]
                        p = exp(sdot * scale - row_lse)
                        dp = 0.0
                        for d in range(D):
                            dp += d_out[s + i, h, d] * v[s + j, h, d]
                        ds = p * (dp - delta) * scale
                        for d in range(D):
                            acc[d] += ds * k[s + j, h, d]
                            dk[s + j, h, d] += <floating> (ds * q[s + i, h, d])
                            dv[s + j, h, d] += <floating> (p * d_out[s + i, h, d])
                    for d in range(D):
                        dq[s + i, h, d] = <floating> acc[d]
    return dq_arr, dk_arr, dv_arr
