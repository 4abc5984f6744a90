"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` operation for operation so both backends
produce bitwise-identical results: squared distances accumulate over the
patch dimension in index order, and scores are ``log_norm - d * inv_two_var``.
"""

import numpy as np

__all__ = ["pairwise_sq_dist", "estep_stream", "stitch_sum"]


def pairwise_sq_dist(z, mu):
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    out = np.zeros((z.shape[0], mu.shape[0]))
    for d in range(z.shape[1]):
        diff = z[:, d, None] - mu[None, :, d]
        out += diff * diff
    return out


def _sq_dist_to(z, ref):
    acc = np.zeros(z.shape[0])
    for d in range(z.shape[1]):
        diff = z[:, d] - ref[d]
        acc += diff * diff
    return acc


def estep_stream(z, mu, log_norm, inv_two_var, threshold, new_log_norm, new_inv_two_var):
    """Streaming hard assignment with on-the-fly filter creation.

    Patches are visited in row order. A patch whose best score is below
    ``threshold`` seeds a new filter (mean = the patch itself) which then
    competes for every later patch. Returns ``(assign, seeds)`` where
    ``seeds`` lists the row index of each created filter in creation order.
    """
    z = np.ascontiguousarray(z, dtype=np.float64)
    n = z.shape[0]
    n_filters = mu.shape[0]
    if n_filters:
        scores = log_norm[None, :] - pairwise_sq_dist(z, mu) * inv_two_var[None, :]
        assign = np.argmax(scores, axis=1).astype(np.int64)
        best = scores[np.arange(n), assign]
    else:
        assign = np.full(n, -1, dtype=np.int64)
        best = np.full(n, -np.inf)

    seeds = []
    cursor = 0
    while cursor < n:
        below = np.flatnonzero(best[cursor:] < threshold)
        if below.size == 0:
            break
        i = cursor + int(below[0])
        new_id = n_filters + len(seeds)
        seeds.append(i)
        assign[i] = new_id
        best[i] = new_log_norm
        if i + 1 < n:
            s = new_log_norm - _sq_dist_to(z[i + 1:], z[i]) * new_inv_two_var
            tail_best = best[i + 1:]
            tail_assign = assign[i + 1:]
            upd = s > tail_best
            tail_best[upd] = s[upd]
            tail_assign[upd] = new_id
        cursor = i + 1
    return assign, np.asarray(seeds, dtype=np.int64)


def stitch_sum(patches, h, w, c, k):
    """Scatter-add (N, P, k*k*C) patches back onto (N, H, W, C) images."""
    patches = np.asarray(patches, dtype=np.float64)
    n = patches.shape[0]
    ho, wo = h - k + 1, w - k + 1
    p6 = patches.reshape(n, ho, wo, k, k, c)
    out = np.zeros((n, h, w, c))
    for i in range(k):
        for j in range(k):
            out[:, i:i + ho, j:j + wo, :] += p6[:, :, :, i, j, :]
    return out
