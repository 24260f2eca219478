"""Reference implementations the library is checked against.

Each one is written from the definition, as plainly as possible, and shares
no code with the package.
"""

import itertools

import numpy as np


def sq_distances(z, b):
    """Exact ``sum_d (z_td - b_nd)^2`` in float64, one dimension at a time."""
    z = np.asarray(z, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((len(z), len(b)))
    for k in range(z.shape[1]):
        out += (z[:, k, None] - b[None, :, k]) ** 2
    return out


def brute_nearest(z, b, dist=None):
    """argmin_n ||z_t - b_n||^2 in double precision, lowest index on ties.

    Differences are squared and summed directly rather than expanded, and
    ``argmin`` returns the first minimum. ``dist`` reuses a matrix from
    :func:`sq_distances`.
    """
    d = sq_distances(z, b) if dist is None else dist
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(len(d)), idx]


def brute_knn(z, b, m, dist=None):
    """First ``m`` entries of each row's distance ordering; equal distances by index."""
    d = sq_distances(z, b) if dist is None else dist
    kth = np.partition(d, m - 1, axis=1)[:, m - 1]
    out = np.empty((len(d), m), dtype=np.int64)
    for r, row in enumerate(d):
        cand = np.flatnonzero(row <= kth[r])  # ascending index order
        out[r] = cand[np.argsort(row[cand], kind="stable")[:m]]
    return out


def optimal_inertia(x, k):
    """Exact k-means optimum by enumerating every assignment of P points."""
    x = np.asarray(x, dtype=np.float64)
    p = len(x)
    best = np.inf
    for labels in itertools.product(range(k), repeat=p):
        labels = np.array(labels)
        cost = 0.0
        for c in range(k):
            pts = x[labels == c]
            if len(pts):
                cost += ((pts - pts.mean(axis=0)) ** 2).sum()
        best = min(best, cost)
    return best


def ema_closed_form(entries0, counts0, sums0, gamma, eps, steps):
    """Codebook after scripted EMA steps, from the unrolled geometric sums.

    ``steps`` is a list of ``(indices, features)``. After step t,
    ``counts = g^t c0 + (1-g) sum_s g^(t-s) n_s`` and likewise for sums;
    an entry is rewritten only on steps where it was assigned.
    """
    entries = np.array(entries0, dtype=np.float64)
    n, d = entries.shape
    hits, feats = [], []
    for idx, z in steps:
        h = np.zeros(n)
        f = np.zeros((n, d))
        for i, row in zip(idx, z):
            h[i] += 1
            f[i] += row
        hits.append(h)
        feats.append(f)
    for t in range(1, len(steps) + 1):
        counts = gamma**t * np.asarray(counts0, dtype=np.float64)
        sums = gamma**t * np.asarray(sums0, dtype=np.float64)
        for s in range(1, t + 1):
            counts = counts + (1 - gamma) * gamma ** (t - s) * hits[s - 1]
            sums = sums + (1 - gamma) * gamma ** (t - s) * feats[s - 1]
        touched = hits[t - 1] > 0
        entries[touched] = sums[touched] / np.maximum(counts[touched], eps)[:, None]
    return entries


def psnr_ref(a, b):
    m = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return 99.0 if m == 0 else min(99.0, 10 * np.log10(1.0 / m))


def ssim_ref(a, b, win=8):
    """Uniform-window SSIM written loop by loop from the formula."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.ndim == 3:
        a = a.mean(axis=2)
        b = b.mean(axis=2)
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            x = a[i:i + win, j:j + win].ravel()
            y = b[i:i + win, j:j + win].ravel()
            mx, my = x.mean(), y.mean()
            vx = ((x - mx) ** 2).mean()
            vy = ((y - my) ** 2).mean()
            cxy = ((x - mx) * (y - my)).mean()
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.clip(np.mean(vals), -1, 1))


def numeric_grad(f, x, eps=1e-3):
    """Central differences of a scalar numpy function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + eps
        fp = f(x)
        flat[i] = o - eps
        fm = f(x)
        flat[i] = o
        g.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return g


def frozen_gradient_error(model, x, indices, param, coords, eps=1e-5, terms="full"):
    """Model gradient vs central differences of the stop-gradient surrogate.

    With token choices pinned, every ``sg(v)`` is held at its value at the
    current parameters and the straight-through decoder input becomes
    ``z_q0 + (z - z0)``. Finite differences of that surrogate are what
    reverse mode should reproduce. Only public tensor ops are used, under
    ``no_grad``, so the check does not lean on the tape.

    The small default step assumes a float64 model. A step of 1e-3 straddles
    leaky-ReLU kinks often enough to show up in bias coordinates.
    """
    from vqlab.tensor import Tape, Tensor, add, backward, gather_rows, mse, no_grad, sub

    cfg = model.config
    x = np.asarray(x, dtype=np.float32)

    with no_grad():
        z0 = model.encode(x).data.copy()
        zq0 = model.effective_codebook().data[indices].copy()

    def surrogate():
        with no_grad():
            z = model.encode(x)
            zq = gather_rows(model.effective_codebook(), indices)
            x_hat = model.decode(add(Tensor(zq0), sub(z, Tensor(z0))), batch=x.shape[0])
            loss = mse(x_hat, Tensor(x)).item()
            if terms == "full":
                loss += cfg.alpha * mse(Tensor(zq0), z).item()
                if cfg.variant != "EMA":
                    loss += cfg.beta * mse(Tensor(z0), zq).item()
        return loss

    for _, p in model.named_parameters():
        p.grad = None
    with Tape():
        res = model.forward_loss(x, indices=indices)
        target = res.loss if terms == "full" else mse(res.x_hat, Tensor(x))
        backward(target)
    analytic = param.grad.reshape(-1)[coords].astype(np.float64)

    flat = param.data.reshape(-1)
    numeric = np.empty(len(coords))
    for k, i in enumerate(coords):
        o = flat[i]
        flat[i] = o + eps
        fp = surrogate()
        flat[i] = o - eps
        fm = surrogate()
        flat[i] = o
        numeric[k] = (fp - fm) / (2 * eps)
    denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / denom)
