"""NumPy fallback for the nearest-entry kernels.

Same contract as the compiled module: scores are ``||b||^2 - 2 z.b`` in
float64, rows processed in blocks, ties resolved to the lowest index.
"""

import numpy as np

TOKEN_BLOCK = 1024
CODE_BLOCK = 4096


def nearest(z, bt, bn, num_threads=1):
    t = z.shape[0]
    n = bt.shape[1]
    idx = np.zeros(t, dtype=np.int64)
    best = np.full(t, np.inf)
    if t == 0 or n == 0:
        return idx, best
    for i0 in range(0, t, TOKEN_BLOCK):
        zb = np.asarray(z[i0:i0 + TOKEN_BLOCK], dtype=np.float64)
        rows = np.arange(zb.shape[0])
        cur = best[i0:i0 + TOKEN_BLOCK]
        cur_idx = idx[i0:i0 + TOKEN_BLOCK]
        for j0 in range(0, n, CODE_BLOCK):
            s = bn[j0:j0 + CODE_BLOCK] - 2.0 * (zb @ bt[:, j0:j0 + CODE_BLOCK])
            local = np.argmin(s, axis=1)
            val = s[rows, local]
            better = val < cur
            cur[better] = val[better]
            cur_idx[better] = local[better] + j0
    return idx, best


def _top_m(s, m):
    """Column indices of the m smallest scores per row, ordered by (score, index)."""
    kth = np.partition(s, m - 1, axis=1)[:, m - 1:m]
    mask = s <= kth
    counts = mask.sum(axis=1)
    out = np.empty((s.shape[0], m), dtype=np.int64)
    exact = counts == m
    if exact.any():
        # nonzero walks row-major, so columns arrive in ascending index order
        cols = np.nonzero(mask[exact])[1].reshape(-1, m)
        vals = np.take_along_axis(s[exact], cols, axis=1)
        out[exact] = np.take_along_axis(cols, np.argsort(vals, axis=1, kind="stable"), axis=1)
    for r in np.flatnonzero(~exact):
        # ties straddle the m-th score; keep the lowest indices among them
        cand = np.flatnonzero(mask[r])
        out[r] = cand[np.argsort(s[r, cand], kind="stable")[:m]]
    return out


def knn(z, bt, bn, m, num_threads=1):
    t = z.shape[0]
    n = bt.shape[1]
    idx = np.zeros((t, m), dtype=np.int64)
    top = np.full((t, m), np.inf)
    if t == 0 or n == 0 or m == 0:
        return idx, top
    block = max(1, min(TOKEN_BLOCK, (1 << 22) // n))  # about 32 MB of scores per block
    for i0 in range(0, t, block):
        zb = np.asarray(z[i0:i0 + block], dtype=np.float64)
        s = bn - 2.0 * (zb @ bt)
        order = _top_m(s, m)
        idx[i0:i0 + block] = order
        top[i0:i0 + block] = np.take_along_axis(s, order, axis=1)
    return idx, top
