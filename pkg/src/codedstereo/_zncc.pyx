# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ZNCC winner-take-all kernel; same contract as ``_zncc_py.zncc_wta``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport NAN, INFINITY

cnp.import_array()


cdef inline void _update(double s, Py_ssize_t k, double* best, long long* bestk,
                         double* prev, double* nxt, double* last) noexcept nogil:
    if bestk[0] == k - 1:
        nxt[0] = s
    if s > best[0]:
        best[0] = s
        bestk[0] = k
        prev[0] = last[0]
        nxt[0] = NAN
    last[0] = s


def zncc_wta(double[:, ::1] left_pad, double[:, ::1] right_pad,
             double[:, ::1] mu_l, double[:, ::1] sd_l,
             double[:, ::1] mu_r, double[:, ::1] sd_r,
             int radius, int max_disp, double min_sd=1e-4):
    cdef Py_ssize_t h = mu_l.shape[0]
    cdef Py_ssize_t w = mu_l.shape[1]
    cdef Py_ssize_t hp = left_pad.shape[0]
    cdef Py_ssize_t win = 2 * radius + 1
    cdef double n = <double>(win * win)

    best_l_a = np.full((h, w), -np.inf)
    best_r_a = np.full((h, w), -np.inf)
    k_l_a = np.zeros((h, w), np.int64)
    k_r_a = np.zeros((h, w), np.int64)
    prev_l_a = np.full((h, w), np.nan)
    prev_r_a = np.full((h, w), np.nan)
    next_l_a = np.full((h, w), np.nan)
    next_r_a = np.full((h, w), np.nan)
    last_l_a = np.full((h, w), np.nan)
    last_r_a = np.full((h, w), np.nan)
    colsum_a = np.zeros(w + 2 * radius)

    cdef double[:, ::1] best_l = best_l_a, best_r = best_r_a
    cdef long long[:, ::1] k_l = k_l_a, k_r = k_r_a
    cdef double[:, ::1] prev_l = prev_l_a, prev_r = prev_r_a
    cdef double[:, ::1] next_l = next_l_a, next_r = next_r_a
    cdef double[:, ::1] last_l = last_l_a, last_r = last_r_a
    cdef double[::1] colsum = colsum_a

    cdef Py_ssize_t k, y, x, i, xr, ncols
    cdef double acc, z, denom

    with nogil:
        for k in range(max_disp + 1):
            if k >= w:
                break
            ncols = w - k + 2 * radius  # padded columns of the product image
            # Column sums over the first window of rows.
            for i in range(ncols):
                acc = 0.0
                for y in range(win):
                    acc = acc + left_pad[y, i + k] * right_pad[y, i]
                colsum[i] = acc
            for y in range(h):
                if y > 0:
                    for i in range(ncols):
                        colsum[i] = colsum[i] + left_pad[y + win - 1, i + k] * right_pad[y + win - 1, i] \
                            - left_pad[y - 1, i + k] * right_pad[y - 1, i]
                acc = 0.0
                for i in range(win):
                    acc = acc + colsum[i]
                for x in range(k, w):
                    xr = x - k
                    if xr > 0:
                        acc = acc + colsum[xr + win - 1] - colsum[xr - 1]
                    if sd_l[y, x] >= min_sd and sd_r[y, xr] >= min_sd:
                        denom = sd_l[y, x] * sd_r[y, xr]
                        z = (acc / n - mu_l[y, x] * mu_r[y, xr]) / denom
                    else:
                        z = 0.0
                    _update(z, k, &best_l[y, x], &k_l[y, x], &prev_l[y, x], &next_l[y, x], &last_l[y, x])
                    _update(z, k, &best_r[y, xr], &k_r[y, xr], &prev_r[y, xr], &next_r[y, xr], &last_r[y, xr])
    return (k_l_a, best_l_a, prev_l_a, next_l_a), (k_r_a, best_r_a, prev_r_a, next_r_a)
