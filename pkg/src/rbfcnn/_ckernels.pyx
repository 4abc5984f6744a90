# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels``.

Arithmetic order matches the numpy fallback exactly; keep them in sync.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def pairwise_sq_dist(z, mu):
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef const double[:, ::1] mv = np.ascontiguousarray(mu, dtype=np.float64)
    cdef Py_ssize_t n = zv.shape[0], f = mv.shape[0], dim = zv.shape[1]
    out = np.zeros((n, f))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, d
    cdef double acc, diff
    with nogil:
        for i in range(n):
            for j in range(f):
                acc = 0.0
                for d in range(dim):
                    diff = zv[i, d] - mv[j, d]
                    acc = acc + diff * diff
                ov[i, j] = acc
    return out


def estep_stream(z, mu, log_norm, inv_two_var, double threshold,
                 double new_log_norm, double new_inv_two_var):
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t n = zv.shape[0], dim = zv.shape[1]
    cdef Py_ssize_t n_old = mu.shape[0]
    cdef Py_ssize_t cap = n_old + 64
    means = np.zeros((cap, dim))
    norms = np.zeros(cap)
    invs = np.zeros(cap)
    if n_old:
        means[:n_old] = mu
        norms[:n_old] = log_norm
        invs[:n_old] = inv_two_var
    cdef double[:, ::1] mv = means
    cdef double[::1] cv = norms
    cdef double[::1] iv = invs
    assign = np.empty(n, dtype=np.int64)
    cdef long long[::1] av = assign
    seeds = []
    cdef Py_ssize_t n_f = n_old
    cdef Py_ssize_t i, j, d, arg
    cdef double best, s, acc, diff
    for i in range(n):
        best = -np.inf
        arg = -1
        for j in range(n_f):
            acc = 0.0
            for d in range(dim):
                diff = zv[i, d] - mv[j, d]
                acc = acc + diff * diff
            s = cv[j] - acc * iv[j]
            if s > best:
                best = s
                arg = j
        if best < threshold:
            if n_f == cap:
                cap = cap * 2
                means = np.concatenate([means, np.zeros((cap - n_f, dim))])
                norms = np.concatenate([norms, np.zeros(cap - n_f)])
                invs = np.concatenate([invs, np.zeros(cap - n_f)])
                mv = means
                cv = norms
                iv = invs
            for d in range(dim):
                mv[n_f, d] = zv[i, d]
            cv[n_f] = new_log_norm
            iv[n_f] = new_inv_two_var
            seeds.append(i)
            arg = n_f
            n_f += 1
        av[i] = arg
    return assign, np.asarray(seeds, dtype=np.int64)


def stitch_sum(patches, Py_ssize_t h, Py_ssize_t w, Py_ssize_t c, Py_ssize_t k):
    cdef const double[:, :, ::1] pv = np.ascontiguousarray(patches, dtype=np.float64)
    cdef Py_ssize_t n = pv.shape[0]
    cdef Py_ssize_t ho = h - k + 1, wo = w - k + 1
    out = np.zeros((n, h, w, c))
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, i, j, y, x, ch, base
    with nogil:
        for b in range(n):
            for i in range(k):
                for j in range(k):
                    base = (i * k + j) * c
                    for y in range(ho):
                        for x in range(wo):
                            for ch in range(c):
                                ov[b, y + i, x + j, ch] = (
                                    ov[b, y + i, x + j, ch] + pv[b, y * wo + x, base + ch]
                                )
    return out
