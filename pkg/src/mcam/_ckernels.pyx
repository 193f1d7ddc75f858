# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled grouped-convolution and batch-norm kernels.

All kernels operate on C-contiguous float64 arrays. Convolutions are valid
cross-correlations with stride 1; callers pad the input beforehand.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


DEF BLK = 32


cdef inline void _row_xcorr(double* orow, const double* xrow, const double* wrow,
                            Py_ssize_t KW, Py_ssize_t OW) noexcept nogil:
    # orow[t] += sum_k wrow[k] * xrow[t + k]; blocks of BLK outputs stay in registers
    cdef double acc[BLK]
    cdef Py_ssize_t t0, k, q, t
    cdef double wv
    cdef const double* xr
    t0 = 0
    while t0 + BLK <= OW:
        for q in range(BLK):
            acc[q] = orow[t0 + q]
        for k in range(KW):
            wv = wrow[k]
            xr = xrow + t0 + k
            for q in range(BLK):
                acc[q] += wv * xr[q]
        for q in range(BLK):
            orow[t0 + q] = acc[q]
        t0 += BLK
    for t in range(t0, OW):
        wv = orow[t]
        for k in range(KW):
            wv += wrow[k] * xrow[t + k]
        orow[t] = wv


def conv2d_forward(double[:, :, :, ::1] xp, double[:, :, :, ::1] w, int groups):
    cdef Py_ssize_t B = xp.shape[0], HP = xp.shape[2]
    cdef Py_ssize_t O = w.shape[0], CPG = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = HP - KH + 1, OW = xp.shape[3] - KW + 1
    cdef Py_ssize_t OPG = O // groups
    out_arr = np.zeros((B, O, OH, OW), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, o, ci, c, kh, oh
    with nogil:
        for b in range(B):
            for o in range(O):
                for ci in range(CPG):
                    c = (o // OPG) * CPG + ci
                    for kh in range(KH):
                        for oh in range(OH):
                            _row_xcorr(&out[b, o, oh, 0], &xp[b, c, oh + kh, 0],
                                       &w[o, ci, kh, 0], KW, OW)
    return out_arr


def conv2d_grad_input(double[:, :, :, ::1] g, double[:, :, :, ::1] w, int groups,
                      Py_ssize_t HP, Py_ssize_t WP):
    cdef Py_ssize_t B = g.shape[0], O = g.shape[1], OH = g.shape[2], OW = g.shape[3]
    cdef Py_ssize_t CPG = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OPG = O // groups
    cdef Py_ssize_t C = CPG * groups
    gx_arr = np.zeros((B, C, HP, WP), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, o, ci, c, kh, oh, kw, ow
    cdef double wv
    cdef double* grow
    cdef double* xrow
    with nogil:
        for b in range(B):
            for o in range(O):
                for ci in range(CPG):
                    c = (o // OPG) * CPG + ci
                    for kh in range(KH):
                        for oh in range(OH):
                            grow = &g[b, o, oh, 0]
                            xrow = &gx[b, c, oh + kh, 0]
                            for kw in range(KW):
                                wv = w[o, ci, kh, kw]
                                for ow in range(OW):
                                    xrow[kw + ow] += wv * grow[ow]
    return gx_arr


def conv2d_grad_weight(double[:, :, :, ::1] g, double[:, :, :, ::1] xp, int groups,
                       Py_ssize_t KH, Py_ssize_t KW):
    cdef Py_ssize_t B = g.shape[0], O = g.shape[1], OH = g.shape[2], OW = g.shape[3]
    cdef Py_ssize_t C = xp.shape[1]
    cdef Py_ssize_t CPG = C // groups, OPG = O // groups
    gw_arr = np.zeros((O, CPG, KH, KW), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, o, ci, c, kh, oh, kw, ow
    cdef double gv, s
    cdef double* grow
    cdef double* xrow
    cdef double* wrow
    with nogil:
        for b in range(B):
            for o in range(O):
                for ci in range(CPG):
                    c = (o // OPG) * CPG + ci
                    for kh in range(KH):
                        wrow = &gw[o, ci, kh, 0]
                        for oh in range(OH):
                            grow = &g[b, o, oh, 0]
                            xrow = &xp[b, c, oh + kh, 0]
                            if KW >= 8:
                                # vectorise over taps: independent accumulators
                                for ow in range(OW):
                                    gv = grow[ow]
                                    for kw in range(KW):
                                        wrow[kw] += gv * xrow[ow + kw]
                            else:
                                for kw in range(KW):
                                    s = 0.0
                                    for ow in range(OW):
                                        s += grow[ow] * xrow[ow + kw]
                                    wrow[kw] += s
    return gw_arr


def batchnorm_forward(double[:, :, ::1] x, double[::1] gamma, double[::1] beta, double eps):
    """Training-mode batch norm on a (B, C, L) view.

    Returns (y, xhat, mean, var) with biased per-channel variance.
    """
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    y_arr = np.empty((B, C, L), dtype=np.float64)
    xhat_arr = np.empty((B, C, L), dtype=np.float64)
    mean_arr = np.zeros(C, dtype=np.float64)
    var_arr = np.zeros(C, dtype=np.float64)
    cdef double[:, :, ::1] y = y_arr
    cdef double[:, :, ::1] xhat = xhat_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] var = var_arr
    cdef Py_ssize_t b, c, i
    cdef double n = <double>(B * L)
    cdef double s, d, inv, gm, bt, mu
    cdef double* xr
    cdef double* yr
    cdef double* hr
    with nogil:
        for c in range(C):
            s = 0.0
            for b in range(B):
                xr = &x[b, c, 0]
                for i in range(L):
                    s += xr[i]
            mu = s / n
            s = 0.0
            for b in range(B):
                xr = &x[b, c, 0]
                for i in range(L):
                    d = xr[i] - mu
                    s += d * d
            mean[c] = mu
            var[c] = s / n
            inv = 1.0 / sqrt(var[c] + eps)
            gm = gamma[c]
            bt = beta[c]
            for b in range(B):
                xr = &x[b, c, 0]
                hr = &xhat[b, c, 0]
                yr = &y[b, c, 0]
                for i in range(L):
                    hr[i] = (xr[i] - mu) * inv
                    yr[i] = gm * hr[i] + bt
    return y_arr, xhat_arr, mean_arr, var_arr


def batchnorm_backward(double[:, :, ::1] g, double[:, :, ::1] xhat, double[::1] gamma,
                       double[::1] var, double eps):
    """Gradients of training-mode batch norm: (dx, dgamma, dbeta)."""
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], L = g.shape[2]
    dx_arr = np.empty((B, C, L), dtype=np.float64)
    dgamma_arr = np.zeros(C, dtype=np.float64)
    dbeta_arr = np.zeros(C, dtype=np.float64)
    cdef double[:, :, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef Py_ssize_t b, c, i
    cdef double n = <double>(B * L)
    cdef double sg, sgh, k, mg, mgh
    cdef double* gr
    cdef double* hr
    cdef double* dr
    with nogil:
        for c in range(C):
            sg = 0.0
            sgh = 0.0
            for b in range(B):
                gr = &g[b, c, 0]
                hr = &xhat[b, c, 0]
                for i in range(L):
                    sg += gr[i]
                    sgh += gr[i] * hr[i]
            dbeta[c] = sg
            dgamma[c] = sgh
            k = gamma[c] / sqrt(var[c] + eps)
            mg = sg / n
            mgh = sgh / n
            for b in range(B):
                gr = &g[b, c, 0]
                hr = &xhat[b, c, 0]
                dr = &dx[b, c, 0]
                for i in range(L):
                    dr[i] = k * (gr[i] - mg - hr[i] * mgh)
    return dx_arr, dgamma_arr, dbeta_arr
