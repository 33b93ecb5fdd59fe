# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels for the NetFV / NetVLAD hot paths.

Same contracts as ``uttenc._kernels_np``; typed loops with a contiguous
inner dimension and a per-frame scratch buffer so each residual is
computed once.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()


cdef double _SQRT2 = sqrt(2.0)
cdef double _INV_SQRT2 = 1.0 / sqrt(2.0)


def netfv_forward(double[:, :, ::1] x, double[:, ::1] w, double[:, ::1] b):
    cdef Py_ssize_t B = x.shape[0], L = x.shape[1], D = x.shape[2]
    cdef Py_ssize_t K = w.shape[0]
    cdef Py_ssize_t i, l, k, d
    cdef double zv, acc, mx, s, g, invl

    out_arr = np.zeros((B, 2 * K * D))
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] z = np.empty((K, D))
    cdef double[::1] a = np.empty(K)
    invl = 1.0 / L

    for i in range(B):
        for l in range(L):
            # z_k = w_k * (x + b_k); logit_k = -0.5 ||z_k||^2
            mx = -1e300
            for k in range(K):
                acc = 0.0
                for d in range(D):
                    zv = w[k, d] * (x[i, l, d] + b[k, d])
                    z[k, d] = zv
                    acc += zv * zv
                a[k] = -0.5 * acc
                if a[k] > mx:
                    mx = a[k]
            s = 0.0
            for k in range(K):
                a[k] = exp(a[k] - mx)
                s += a[k]
            for k in range(K):
                g = a[k] / s * invl
                for d in range(D):
                    zv = z[k, d]
                    out[i, k * D + d] += g * zv
                    out[i, K * D + k * D + d] += g * (zv * zv - 1.0) * _INV_SQRT2
    return out_arr


def netfv_backward(double[:, :, ::1] x, double[:, ::1] w, double[:, ::1] b,
                   double[:, ::1] gout):
    cdef Py_ssize_t B = x.shape[0], L = x.shape[1], D = x.shape[2]
    cdef Py_ssize_t K = w.shape[0]
    cdef Py_ssize_t i, l, k, d
    cdef double zv, acc, mx, s, cbar, dz, g, gm, gs, invl

    gw_arr = np.zeros((K, D))
    gb_arr = np.zeros((K, D))
    gx_arr = np.zeros((B, L, D))
    cdef double[:, ::1] gw = gw_arr
    cdef double[:, ::1] gb = gb_arr
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, ::1] z = np.empty((K, D))
    cdef double[::1] gam = np.empty(K)
    cdef double[::1] c = np.empty(K)
    invl = 1.0 / L

    for i in range(B):
        for l in range(L):
            mx = -1e300
            for k in range(K):
                acc = 0.0
                for d in range(D):
                    zv = w[k, d] * (x[i, l, d] + b[k, d])
                    z[k, d] = zv
                    acc += zv * zv
                gam[k] = -0.5 * acc
                if gam[k] > mx:
                    mx = gam[k]
            s = 0.0
            for k in range(K):
                gam[k] = exp(gam[k] - mx)
                s += gam[k]
            cbar = 0.0
            for k in range(K):
                gam[k] /= s
                acc = 0.0
                for d in range(D):
                    zv = z[k, d]
                    acc += zv * gout[i, k * D + d]
                    acc += (zv * zv - 1.0) * gout[i, K * D + k * D + d] * _INV_SQRT2
                c[k] = acc * invl
                cbar += gam[k] * c[k]
            for k in range(K):
                # g: gradient w.r.t. the assignment logit of cluster k
                g = gam[k] * (c[k] - cbar)
                for d in range(D):
                    zv = z[k, d]
                    gm = gout[i, k * D + d]
                    gs = gout[i, K * D + k * D + d]
                    dz = (gam[k] * invl * gm
                          + (gam[k] * _SQRT2 * invl * gs - g) * zv)
                    gw[k, d] += dz * (x[i, l, d] + b[k, d])
                    gb[k, d] += dz * w[k, d]
                    gx[i, l, d] += dz * w[k, d]
    return gw_arr, gb_arr, gx_arr


def netvlad_forward(double[:, :, ::1] x, double[:, ::1] mu,
                    double[:, ::1] w, double[::1] b):
    cdef Py_ssize_t B = x.shape[0], L = x.shape[1], D = x.shape[2]
    cdef Py_ssize_t K = w.shape[0]
    cdef Py_ssize_t i, l, k, d
    cdef double acc, mx, s, bt

    v_arr = np.zeros((B, K, D))
    cdef double[:, :, ::1] v = v_arr
    cdef double[::1] a = np.empty(K)

    for i in range(B):
        for l in range(L):
            mx = -1e300
            for k in range(K):
                acc = b[k]
                for d in range(D):
                    acc += w[k, d] * x[i, l, d]
                a[k] = acc
                if acc > mx:
                    mx = acc
            s = 0.0
            for k in range(K):
                a[k] = exp(a[k] - mx)
                s += a[k]
            for k in range(K):
                bt = a[k] / s
                for d in range(D):
                    v[i, k, d] += bt * (x[i, l, d] - mu[k, d])
    return v_arr


def netvlad_backward(double[:, :, ::1] x, double[:, ::1] mu,
                     double[:, ::1] w, double[::1] b,
                     double[:, :, ::1] gv):
    cdef Py_ssize_t B = x.shape[0], L = x.shape[1], D = x.shape[2]
    cdef Py_ssize_t K = w.shape[0]
    cdef Py_ssize_t i, l, k, d
    cdef double acc, mx, s, cbar, ds, bt

    gmu_arr = np.zeros((K, D))
    gw_arr = np.zeros((K, D))
    gb_arr = np.zeros(K)
    gx_arr = np.zeros((B, L, D))
    cdef double[:, ::1] gmu = gmu_arr
    cdef double[:, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[::1] beta = np.empty(K)
    cdef double[::1] c = np.empty(K)

    for i in range(B):
        for l in range(L):
            mx = -1e300
            for k in range(K):
                acc = b[k]
                for d in range(D):
                    acc += w[k, d] * x[i, l, d]
                beta[k] = acc
                if acc > mx:
                    mx = acc
            s = 0.0
            for k in range(K):
                beta[k] = exp(beta[k] - mx)
                s += beta[k]
            cbar = 0.0
            for k in range(K):
                beta[k] /= s
                acc = 0.0
                for d in range(D):
                    acc += gv[i, k, d] * (x[i, l, d] - mu[k, d])
                c[k] = acc
                cbar += beta[k] * c[k]
            for k in range(K):
                bt = beta[k]
                ds = bt * (c[k] - cbar)
                gb[k] += ds
                for d in range(D):
                    gw[k, d] += ds * x[i, l, d]
                    gmu[k, d] -= bt * gv[i, k, d]
                    gx[i, l, d] += ds * w[k, d] + bt * gv[i, k, d]
    return gmu_arr, gw_arr, gb_arr, gx_arr
