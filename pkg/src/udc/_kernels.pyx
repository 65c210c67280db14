# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: greedy residual quantisation, EMA scatter, top-K selection."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def residual_quantize(const double[:, ::1] r0, const double[:, :, ::1] codebooks):
    cdef Py_ssize_t n = r0.shape[0], dim = r0.shape[1]
    cdef Py_ssize_t levels = codebooks.shape[0], n_codes = codebooks.shape[1]
    cdef Py_ssize_t i, l, k, j, best
    cdef double dist, diff, best_dist
    indices_arr = np.empty((n, levels), dtype=np.int64)
    residuals_arr = np.empty((n, levels + 1, dim), dtype=np.float64)
    z_arr = np.zeros((n, dim), dtype=np.float64)
    cdef long long[:, ::1] indices = indices_arr
    cdef double[:, :, ::1] res = residuals_arr
    cdef double[:, ::1] z = z_arr
    for i in range(n):
        for j in range(dim):
            res[i, 0, j] = r0[i, j]
        for l in range(levels):
            best = 0
            best_dist = 0.0
            for k in range(n_codes):
                dist = 0.0
                for j in range(dim):
                    diff = res[i, l, j] - codebooks[l, k, j]
                    dist += diff * diff
                # strict comparison keeps the lowest index on ties
                if k == 0 or dist < best_dist:
                    best_dist = dist
                    best = k
            indices[i, l] = best
            for j in range(dim):
                res[i, l + 1, j] = res[i, l, j] - codebooks[l, best, j]
                z[i, j] += codebooks[l, best, j]
    return indices_arr, residuals_arr, z_arr


def ema_scatter(const long long[::1] indices, const double[:, ::1] vectors, Py_ssize_t n_codes):
    cdef Py_ssize_t n = vectors.shape[0], dim = vectors.shape[1]
    cdef Py_ssize_t i, j, c
    sums_arr = np.zeros((n_codes, dim), dtype=np.float64)
    counts_arr = np.zeros(n_codes, dtype=np.float64)
    cdef double[:, ::1] sums = sums_arr
    cdef double[::1] counts = counts_arr
    for i in range(n):
        c = indices[i]
        counts[c] += 1.0
        for j in range(dim):
            sums[c, j] += vectors[i, j]
    return sums_arr, counts_arr


def topk_indices(const double[:, ::1] scores, Py_ssize_t k):
    cdef Py_ssize_t n = scores.shape[0], v = scores.shape[1]
    cdef Py_ssize_t i, j, pos, filled
    cdef double s
    if k > v:
        k = v
    out_arr = np.empty((n, k), dtype=np.int64)
    cdef long long[:, ::1] out = out_arr
    for i in range(n):
        filled = 0
        for j in range(v):
            s = scores[i, j]
            # scan order already favours lower ids, so only strictly larger scores displace
            if filled == k and s <= scores[i, out[i, k - 1]]:
                continue
            pos = filled if filled < k else k - 1
            while pos > 0 and scores[i, out[i, pos - 1]] < s:
                out[i, pos] = out[i, pos - 1]
                pos -= 1
            out[i, pos] = j
            if filled < k:
                filled += 1
    return out_arr
