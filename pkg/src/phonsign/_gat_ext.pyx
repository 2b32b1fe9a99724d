# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled edge-list graph attention (forward and reverse sweep).

Shapes: H (M, N, K, Dh) projected node features for M independent graphs,
a (K, 2 Dh) attention vectors (receiver half first). Edges are grouped by
receiver: edges starts[i]..starts[i+1]-1 deliver into node i from src[e].
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, INFINITY

cnp.import_array()


def gat_forward(double[:, :, :, ::1] H, double[:, ::1] a, long[::1] src, long[::1] starts,
                double slope):
    cdef Py_ssize_t M = H.shape[0], N = H.shape[1], K = H.shape[2], Dh = H.shape[3]
    cdef Py_ssize_t E = src.shape[0]
    cdef Py_ssize_t m, n, k, d, e, j, e0, e1
    cdef double acc, mx, tot, w, v, min_abs = INFINITY
    out_arr = np.zeros((M, N, K, Dh), dtype=np.float64)
    alpha_arr = np.empty((M, K, E), dtype=np.float64)
    pre_arr = np.empty((M, K, E), dtype=np.float64)
    recv_arr = np.empty(N, dtype=np.float64)
    send_arr = np.empty(N, dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, :, ::1] alpha = alpha_arr
    cdef double[:, :, ::1] pre = pre_arr
    cdef double[::1] recv = recv_arr
    cdef double[::1] send = send_arr
    with nogil:
        for m in range(M):
            for k in range(K):
                for n in range(N):
                    acc = 0.0
                    w = 0.0
                    for d in range(Dh):
                        acc = acc + H[m, n, k, d] * a[k, d]
                        w = w + H[m, n, k, d] * a[k, Dh + d]
                    recv[n] = acc
                    send[n] = w
                for n in range(N):
                    e0 = starts[n]
                    e1 = starts[n + 1]
                    mx = -INFINITY
                    for e in range(e0, e1):
                        v = recv[n] + send[src[e]]
                        pre[m, k, e] = v
                        if fabs(v) < min_abs:
                            min_abs = fabs(v)
                        if v <= 0:
                            v = slope * v
                        alpha[m, k, e] = v
                        if v > mx:
                            mx = v
                    tot = 0.0
                    for e in range(e0, e1):
                        v = exp(alpha[m, k, e] - mx)
                        alpha[m, k, e] = v
                        tot = tot + v
                    for e in range(e0, e1):
                        w = alpha[m, k, e] / tot
                        alpha[m, k, e] = w
                        j = src[e]
                        for d in range(Dh):
                            out[m, n, k, d] = out[m, n, k, d] + w * H[m, j, k, d]
    return out_arr, alpha_arr, pre_arr, min_abs


def gat_backward(double[:, :, :, ::1] g, double[:, :, :, ::1] H, double[:, ::1] a,
                 long[::1] src, long[::1] starts, double[:, :, ::1] alpha,
                 double[:, :, ::1] pre, double slope):
    cdef Py_ssize_t M = H.shape[0], N = H.shape[1], K = H.shape[2], Dh = H.shape[3]
    cdef Py_ssize_t E = src.shape[0]
    cdef Py_ssize_t m, n, k, d, e, j, e0, e1
    cdef double acc, dot, w, ge
    gH_arr = np.zeros((M, N, K, Dh), dtype=np.float64)
    ga_arr = np.zeros((K, 2 * Dh), dtype=np.float64)
    galpha_arr = np.empty(E, dtype=np.float64)
    grecv_arr = np.empty(N, dtype=np.float64)
    gsend_arr = np.empty(N, dtype=np.float64)
    cdef double[:, :, :, ::1] gH = gH_arr
    cdef double[:, ::1] ga = ga_arr
    cdef double[::1] galpha = galpha_arr
    cdef double[::1] grecv = grecv_arr
    cdef double[::1] gsend = gsend_arr
    with nogil:
        for m in range(M):
            for k in range(K):
                for n in range(N):
                    grecv[n] = 0.0
                    gsend[n] = 0.0
                for n in range(N):
                    e0 = starts[n]
                    e1 = starts[n + 1]
                    dot = 0.0
                    for e in range(e0, e1):
                        j = src[e]
                        w = alpha[m, k, e]
                        acc = 0.0
                        for d in range(Dh):
                            acc = acc + g[m, n, k, d] * H[m, j, k, d]
                            gH[m, j, k, d] = gH[m, j, k, d] + w * g[m, n, k, d]
                        galpha[e] = acc
                        dot = dot + w * acc
                    for e in range(e0, e1):
                        ge = alpha[m, k, e] * (galpha[e] - dot)
                        if pre[m, k, e] <= 0:
                            ge = slope * ge
                        grecv[n] = grecv[n] + ge
                        gsend[src[e]] = gsend[src[e]] + ge
                for n in range(N):
                    for d in range(Dh):
                        gH[m, n, k, d] = gH[m, n, k, d] + grecv[n] * a[k, d] + gsend[n] * a[k, Dh + d]
                        ga[k, d] = ga[k, d] + grecv[n] * H[m, n, k, d]
                        ga[k, Dh + d] = ga[k, Dh + d] + gsend[n] * H[m, n, k, d]
    return gH_arr, ga_arr
