# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled diagonal selective-scan kernels (forward and reverse sweep).

Shapes: u (B, T, M), a/b/c (B, T, S), y (B, T, M), states (B, T, M, S).
Recurrence per channel m: x_t = a_t * x_{t-1} + b_t * u_t[m],  y_t[m] = <c_t, x_t>.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def scan_forward(double[:, :, ::1] u, double[:, :, ::1] a, double[:, :, ::1] b,
                 double[:, :, ::1] c, bint store_states=True):
    cdef Py_ssize_t B = u.shape[0], T = u.shape[1], M = u.shape[2], S = a.shape[2]
    cdef Py_ssize_t i, t, m, s
    cdef double acc, xv, ut
    y_arr = np.zeros((B, T, M), dtype=np.float64)
    cdef double[:, :, ::1] y = y_arr
    x_arr = np.zeros((M, S), dtype=np.float64)
    cdef double[:, ::1] x = x_arr
    cdef double[:, :, :, ::1] st
    if store_states:
        st_arr = np.empty((B, T, M, S), dtype=np.float64)
        st = st_arr
    else:
        st_arr = None
    with nogil:
        for i in range(B):
            for m in range(M):
                for s in range(S):
                    x[m, s] = 0.0
            for t in range(T):
                for m in range(M):
                    ut = u[i, t, m]
                    acc = 0.0
                    for s in range(S):
                        xv = a[i, t, s] * x[m, s] + b[i, t, s] * ut
                        x[m, s] = xv
                        acc = acc + c[i, t, s] * xv
                        if store_states:
                            st[i, t, m, s] = xv
                    y[i, t, m] = acc
    return y_arr, st_arr


def scan_backward(double[:, :, ::1] gy, double[:, :, ::1] u, double[:, :, ::1] a,
                  double[:, :, ::1] b, double[:, :, ::1] c, double[:, :, :, ::1] st):
    cdef Py_ssize_t B = u.shape[0], T = u.shape[1], M = u.shape[2], S = a.shape[2]
    cdef Py_ssize_t i, t, m, s
    cdef double gxv, g, acc_u, prev
    gu_arr = np.zeros((B, T, M), dtype=np.float64)
    ga_arr = np.zeros((B, T, S), dtype=np.float64)
    gb_arr = np.zeros((B, T, S), dtype=np.float64)
    gc_arr = np.zeros((B, T, S), dtype=np.float64)
    cdef double[:, :, ::1] gu = gu_arr
    cdef double[:, :, ::1] ga = ga_arr
    cdef double[:, :, ::1] gb = gb_arr
    cdef double[:, :, ::1] gc = gc_arr
    gx_arr = np.zeros((M, S), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    with nogil:
        for i in range(B):
            for m in range(M):
                for s in range(S):
                    gx[m, s] = 0.0
            t = T - 1
            while t >= 0:
                for m in range(M):
                    g = gy[i, t, m]
                    acc_u = 0.0
                    for s in range(S):
                        gc[i, t, s] += g * st[i, t, m, s]
                        if t + 1 < T:
                            gxv = gx[m, s] * a[i, t + 1, s] + g * c[i, t, s]
                        else:
                            gxv = g * c[i, t, s]
                        gx[m, s] = gxv
                        if t > 0:
                            prev = st[i, t - 1, m, s]
                            ga[i, t, s] += gxv * prev
                        gb[i, t, s] += gxv * u[i, t, m]
                        acc_u = acc_u + gxv * b[i, t, s]
                    gu[i, t, m] = acc_u
                t -= 1
    return gu_arr, ga_arr, gb_arr, gc_arr
