# cython: language_level=3
"""Compiled inner loops. Every function here has a numpy twin in
``mvem._fallback`` with the same signature and floating-point operation order."""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

cdef enum:
    PATH_BLOCK = 16


def affine_paths(const double[:, ::1] dW, const double[::1] x0,
                 const double[::1] law_mean, double h, double lam,
                 double theta, double sigma, Py_ssize_t save_every):
    """Advance independent 1-d paths of the affine mean-field step.

    ``dW`` is (P, n) with one row per path, ``law_mean`` holds the law mean at
    steps 0..n-1. Returns the states at steps 0, save_every, 2*save_every, ...
    as an (n // save_every + 1, P) array.
    """
    cdef Py_ssize_t P = dW.shape[0]
    cdef Py_ssize_t n = dW.shape[1]
    cdef Py_ssize_t n_saved = n // save_every + 1
    cdef Py_ssize_t p0, q, nb, k, s, next_save
    cdef double xb[PATH_BLOCK]
    cdef double drift_mean
    out_arr = np.empty((n_saved, P), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        # a block of paths is stepped together so the per-path recurrences overlap
        p0 = 0
        while p0 < P:
            nb = min(<Py_ssize_t>PATH_BLOCK, P - p0)
            for q in range(nb):
                xb[q] = x0[p0 + q]
                out[0, p0 + q] = xb[q]
            s = 1
            next_save = save_every
            for k in range(n):
                drift_mean = theta * law_mean[k]
                for q in range(nb):
                    xb[q] = xb[q] + h * ((-lam) * xb[q] + drift_mean) + sigma * dW[p0 + q, k]
                if k + 1 == next_save:
                    for q in range(nb):
                        out[s, p0 + q] = xb[q]
                    s += 1
                    next_save += save_every
            p0 += nb
    return out_arr


def affine_interacting(const double[:, :, ::1] dW, const double[:, ::1] x0,
                       double h, double lam, double theta, double sigma,
                       Py_ssize_t save_every):
    """Advance R independent N-particle systems with empirical-mean interaction.

    ``dW`` is (R, N, n); ``x0`` is (R, N). The empirical mean of every system
    is taken before any particle moves (synchronous update) and summed in
    index order. Returns (n // save_every + 1, R, N).
    """
    cdef Py_ssize_t R = dW.shape[0]
    cdef Py_ssize_t N = dW.shape[1]
    cdef Py_ssize_t n = dW.shape[2]
    cdef Py_ssize_t n_saved = n // save_every + 1
    cdef Py_ssize_t r, j, k, s
    cdef double acc, m
    x_arr = np.array(x0, dtype=np.float64, copy=True)
    cdef double[:, ::1] x = x_arr
    out_arr = np.empty((n_saved, R, N), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    with nogil:
        for r in range(R):
            for j in range(N):
                out[0, r, j] = x[r, j]
        s = 1
        for k in range(n):
            for r in range(R):
                acc = 0.0
                for j in range(N):
                    acc = acc + x[r, j]
                m = acc / N
                for j in range(N):
                    x[r, j] = x[r, j] + h * ((-lam) * x[r, j] + theta * m) + sigma * dW[r, j, k]
            if (k + 1) % save_every == 0:
                for r in range(R):
                    for j in range(N):
                        out[s, r, j] = x[r, j]
                s += 1
    return out_arr


def lsap(const double[:, ::1] cost):
    """Minimum-cost perfect matching on a square cost matrix (Hungarian method
    with row/column potentials, O(n^3)). Returns ``perm`` with row i matched
    to column ``perm[i]``."""
    cdef Py_ssize_t n = cost.shape[0]
    if cost.shape[1] != n:
        raise ValueError("cost matrix must be square")
    u_arr = np.zeros(n + 1)
    v_arr = np.zeros(n + 1)
    p_arr = np.zeros(n + 1, dtype=np.intp)
    way_arr = np.zeros(n + 1, dtype=np.intp)
    minv_arr = np.empty(n + 1)
    used_arr = np.empty(n + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr, v = v_arr, minv = minv_arr
    cdef Py_ssize_t[::1] p = p_arr, way = way_arr
    cdef unsigned char[::1] used = used_arr
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur
    with nogil:
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            for j in range(n + 1):
                minv[j] = INFINITY
                used[j] = 0
            while True:
                used[j0] = 1
                i0 = p[j0]
                delta = INFINITY
                j1 = 0
                for j in range(1, n + 1):
                    if not used[j]:
                        cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                        if cur < minv[j]:
                            minv[j] = cur
                            way[j] = j0
                        if minv[j] < delta:
                            delta = minv[j]
                            j1 = j
                for j in range(n + 1):
                    if used[j]:
                        u[p[j]] += delta
                        v[j] -= delta
                    else:
                        minv[j] -= delta
                j0 = j1
                if p[j0] == 0:
                    break
            while True:
                j1 = way[j0]
                p[j0] = p[j1]
                j0 = j1
                if j0 == 0:
                    break
    perm = np.empty(n, dtype=np.intp)
    for j in range(1, n + 1):
        perm[p_arr[j] - 1] = j - 1
    return perm
