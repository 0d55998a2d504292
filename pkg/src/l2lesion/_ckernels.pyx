# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled pooling kernels.

Every loop accumulates in the same order as the numpy fallback in
``_pykernels`` so both backends return bit-identical arrays.  Build with
``-ffp-contract=off``; fused multiply-add would break that guarantee.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def l2_pool_fwd(const double[:, :, ::1] x, Py_ssize_t fh, Py_ssize_t fw,
                Py_ssize_t sh, Py_ssize_t sw, bint normalized):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t Ho = (H - fh) // sh + 1, Wo = (W - fw) // sw + 1
    out_arr = np.empty((B, Ho, Wo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, oi, oj, di, dj
    cdef double acc, v, n = <double>(fh * fw)
    with nogil:
        for b in range(B):
            for oi in range(Ho):
                for oj in range(Wo):
                    acc = 0.0
                    for di in range(fh):
                        for dj in range(fw):
                            v = x[b, oi * sh + di, oj * sw + dj]
                            acc = acc + v * v
                    if normalized:
                        out[b, oi, oj] = sqrt(acc / n)
                    else:
                        out[b, oi, oj] = sqrt(acc)
    return out_arr


def l2_pool_bwd(const double[:, :, ::1] x, const double[:, :, ::1] g,
                Py_ssize_t fh, Py_ssize_t fw, Py_ssize_t sh, Py_ssize_t sw,
                bint normalized, bint literal, double eps):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t Ho = g.shape[1], Wo = g.shape[2]
    gx_arr = np.zeros((B, H, W), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, oi, oj, di, dj
    cdef double acc, v, norm, c, n = <double>(fh * fw)
    with nogil:
        for b in range(B):
            # reverse row-major over windows: matches the fallback's
            # offset-major accumulation order on overlapping windows
            for oi in range(Ho - 1, -1, -1):
                for oj in range(Wo - 1, -1, -1):
                    acc = 0.0
                    for di in range(fh):
                        for dj in range(fw):
                            v = x[b, oi * sh + di, oj * sw + dj]
                            acc = acc + v * v
                    if literal:
                        norm = sqrt(acc)
                        if norm < eps:
                            norm = eps
                        c = (n * g[b, oi, oj]) / (2.0 * norm)
                        for di in range(fh):
                            for dj in range(fw):
                                gx[b, oi * sh + di, oj * sw + dj] += c
                    else:
                        if normalized:
                            norm = sqrt(acc / n)
                            if norm < eps:
                                norm = eps
                            c = g[b, oi, oj] / (n * norm)
                        else:
                            norm = sqrt(acc)
                            if norm < eps:
                                norm = eps
                            c = g[b, oi, oj] / norm
                        for di in range(fh):
                            for dj in range(fw):
                                gx[b, oi * sh + di, oj * sw + dj] += c * x[b, oi * sh + di, oj * sw + dj]
    return gx_arr


def max_pool_fwd(const double[:, :, ::1] x, Py_ssize_t fh, Py_ssize_t fw,
                 Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t Ho = (H - fh) // sh + 1, Wo = (W - fw) // sw + 1
    out_arr = np.empty((B, Ho, Wo), dtype=np.float64)
    idx_arr = np.empty((B, Ho, Wo), dtype=np.int64)
    cdef double[:, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, oi, oj, di, dj, i, j, best_i
    cdef double best, v
    with nogil:
        for b in range(B):
            for oi in range(Ho):
                for oj in range(Wo):
                    i = oi * sh
                    j = oj * sw
                    best = x[b, i, j]
                    best_i = i * W + j
                    for di in range(fh):
                        for dj in range(fw):
                            v = x[b, i + di, j + dj]
                            if v > best:
                                best = v
                                best_i = (i + di) * W + j + dj
                    out[b, oi, oj] = best
                    idx[b, oi, oj] = best_i
    return out_arr, idx_arr


def max_pool_bwd(const cnp.int64_t[:, :, ::1] idx, const double[:, :, ::1] g,
                 Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t B = g.shape[0], Ho = g.shape[1], Wo = g.shape[2]
    gx_arr = np.zeros((B, H * W), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef Py_ssize_t b, oi, oj
    with nogil:
        for b in range(B):
            for oi in range(Ho):
                for oj in range(Wo):
                    gx[b, idx[b, oi, oj]] += g[b, oi, oj]
    return gx_arr.reshape((B, H, W))


def rect_pool_fwd(const double[:, :, ::1] x, const cnp.int64_t[:, ::1] rects, bint is_max):
    """Pool each channel over each rectangle (y0, y1, x0, x1), half-open."""
    cdef Py_ssize_t C = x.shape[0], W = x.shape[2], M = rects.shape[0]
    out_arr = np.empty((M, C), dtype=np.float64)
    idx_arr = np.zeros((M, C), dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef cnp.int64_t[:, ::1] idx = idx_arr
    cdef Py_ssize_t m, c, i, j, y0, y1, x0, x1, best_i
    cdef double acc, v, best
    with nogil:
        for m in range(M):
            y0 = rects[m, 0]
            y1 = rects[m, 1]
            x0 = rects[m, 2]
            x1 = rects[m, 3]
            for c in range(C):
                if is_max:
                    best = x[c, y0, x0]
                    best_i = y0 * W + x0
                    for i in range(y0, y1):
                        for j in range(x0, x1):
                            v = x[c, i, j]
                            if v > best:
                                best = v
                                best_i = i * W + j
                    out[m, c] = best
                    idx[m, c] = best_i
                else:
                    acc = 0.0
                    for i in range(y0, y1):
                        for j in range(x0, x1):
                            v = x[c, i, j]
                            acc = acc + v * v
                    out[m, c] = sqrt(acc)
    return out_arr, idx_arr


def rect_pool_bwd(const double[:, :, ::1] x, const cnp.int64_t[:, ::1] rects,
                  const double[:, ::1] out, const cnp.int64_t[:, ::1] idx,
                  const double[:, ::1] g, bint is_max, double eps):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2], M = rects.shape[0]
    gx_arr = np.zeros((C, H, W), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t m, c, i, j, y0, y1, x0, x1, k
    cdef double norm, cf
    with nogil:
        for m in range(M):
            y0 = rects[m, 0]
            y1 = rects[m, 1]
            x0 = rects[m, 2]
            x1 = rects[m, 3]
            for c in range(C):
                if is_max:
                    k = idx[m, c]
                    gx[c, k // W, k % W] += g[m, c]
                else:
                    norm = out[m, c]
                    if norm < eps:
                        norm = eps
                    cf = g[m, c] / norm
                    for i in range(y0, y1):
                        for j in range(x0, x1):
                            gx[c, i, j] += cf * x[c, i, j]
    return gx_arr
