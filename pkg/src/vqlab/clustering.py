"""K-means used to build static codebooks.

Full-batch Lloyd with k-means++ seeding, and a mini-batch variant for very
large ``K``. Assignment goes through the shared nearest-entry kernel; center
updates use ``np.bincount`` so the accumulation order is the point order and
results do not depend on how the assignment step was split.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels

SOURCES = ("pixel-patch", "tiny-encoder", "imported-file")


class ClusteringError(ValueError):
    pass


@dataclass
class FeatureSet:
    """P feature rows of width D plus where they came from."""

    rows: np.ndarray
    source: str = "pixel-patch"
    dataset_id: str = ""
    seed: int = 0

    def __post_init__(self):
        rows = np.asarray(self.rows)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ClusteringError(f"feature matrix must be P x D with P >= 1, got {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ClusteringError("feature matrix contains NaN or Inf")
        self.rows = np.ascontiguousarray(rows, dtype=np.float32)

    def __len__(self):
        return self.rows.shape[0]

    @property
    def dim(self):
        return self.rows.shape[1]


@dataclass
class ClusterResult:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations_run: int
    inertia_history: list = field(default_factory=list)
    reseeded: list = field(default_factory=list)


def _rows(features):
    x = features.rows if isinstance(features, FeatureSet) else np.asarray(features)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ClusteringError(f"feature matrix must be P x D with P >= 1, got {x.shape}")
    x = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ClusteringError("feature matrix contains NaN or Inf")
    return x


def _check_k(k, p):
    if k < 1:
        raise ClusteringError(f"K must be >= 1, got {k}")
    if k > p:
        raise ClusteringError(f"K={k} exceeds the number of feature rows P={p}")


def _sq_dist(x, c):
    d = x - c
    return np.einsum("ij,ij->i", d, d)


def kmeans_pp_init(features, k, seed):
    """k-means++ seeding: first row uniform, then proportional to squared distance."""
    x = _rows(features)
    p = x.shape[0]
    _check_k(k, p)
    rng = np.random.default_rng(seed)
    chosen = np.empty(k, dtype=np.int64)
    taken = np.zeros(p, dtype=bool)
    chosen[0] = rng.integers(p)
    taken[chosen[0]] = True
    d2 = _sq_dist(x, x[chosen[0]])
    for i in range(1, k):
        w = np.where(taken, 0.0, d2)
        total = w.sum()
        if total > 0:
            nxt = rng.choice(p, p=w / total)
        else:
            # only duplicates of chosen rows remain
            nxt = rng.choice(np.flatnonzero(~taken))
        chosen[i] = nxt
        taken[nxt] = True
        np.minimum(d2, _sq_dist(x, x[nxt]), out=d2)
    return x[chosen].copy()


def _means(x, assign, k):
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    sums = np.empty((k, x.shape[1]))
    for d in range(x.shape[1]):
        sums[:, d] = np.bincount(assign, weights=x[:, d], minlength=k)
    return sums, counts


def _reseed(x, centers, assign, counts):
    """Move each empty center onto the point farthest from its own center."""
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return False
    d2 = _sq_dist(x, centers[assign])
    order = np.argsort(-d2, kind="stable")
    for e, pt in zip(empty, order[: empty.size]):
        centers[e] = x[pt]
    return True


def _inertia(x, centers, assign):
    return float(_sq_dist(x, centers[assign]).sum())


def _assign(x, centers):
    idx, _ = kernels.nearest(x, centers)
    return idx


def kmeans_fit(features, k, max_iters=100, tol=1e-4, seed=0):
    """Lloyd's algorithm from k-means++ seeds.

    Stops when no center moves more than ``tol`` (L2) or after ``max_iters``
    iterations. Empty clusters are reseeded to the farthest point. The
    returned centers are the means of the returned assignments, and every
    center owns at least one point when K does not exceed the number of
    distinct rows.
    """
    x = _rows(features)
    if max_iters < 1:
        raise ClusteringError("max_iters must be >= 1")
    _check_k(k, x.shape[0])
    centers = kmeans_pp_init(x, k, seed)
    history, reseeded = [], []
    it = 0
    for it in range(1, max_iters + 1):
        assign = _assign(x, centers)
        history.append(_inertia(x, centers, assign))
        sums, counts = _means(x, assign, k)
        new = centers.copy()
        live = counts > 0
        new[live] = sums[live] / counts[live, None]
        did_reseed = _reseed(x, new, assign, counts)
        reseeded.append(did_reseed)
        shift = float(np.sqrt(_sq_dist(new, centers).max()))
        centers = new
        if shift < tol and not did_reseed:
            break

    assign = _assign(x, centers)
    for _ in range(k):
        counts = np.bincount(assign, minlength=k)
        if not _reseed(x, centers, assign, counts):
            break
        reseeded.append(True)
        history.append(_inertia(x, centers, assign))
        assign = _assign(x, centers)
    sums, counts = _means(x, assign, k)
    live = counts > 0
    centers[live] = sums[live] / counts[live, None]
    inertia = _inertia(x, centers, assign)
    history.append(inertia)
    return ClusterResult(centers, assign, inertia, it, history, reseeded)


# k-means++ on more than this many (K * rows * D) multiply-adds is skipped in
# favour of random distinct rows.
_PP_BUDGET = 5e9


def minibatch_kmeans_fit(features, k, batch=1024, steps=100, seed=0):
    """Mini-batch k-means with per-center 1/count learning rates.

    Seeds come from k-means++ over a subsample of ``min(P, 3 max(K, batch))``
    rows (random
    distinct rows when that would be too costly). Final assignments come from
    one full pass; empty clusters in that pass are reseeded.
    """
    x = _rows(features)
    p = x.shape[0]
    _check_k(k, p)
    if batch < 1 or steps < 0:
        raise ClusteringError("batch must be >= 1 and steps >= 0")
    rng = np.random.default_rng(seed)
    init_rows = min(p, 3 * max(k, batch))
    sample = rng.choice(p, size=init_rows, replace=False) if init_rows < p else np.arange(p)
    if k * init_rows * x.shape[1] <= _PP_BUDGET:
        centers = kmeans_pp_init(x[sample], k, int(rng.integers(2**31)))
    else:
        centers = x[rng.choice(p, size=k, replace=False)].copy()

    seen = np.zeros(k)
    b = min(batch, p)
    for _ in range(steps):
        rows = x[rng.choice(p, size=b, replace=False)]
        assign = _assign(rows, centers)
        sums, counts = _means(rows, assign, k)
        hit = counts > 0
        seen[hit] += counts[hit]
        # running mean: c <- c + (sum - n c) / seen
        centers[hit] += (sums[hit] - counts[hit, None] * centers[hit]) / seen[hit, None]

    assign = _assign(x, centers)
    reseeded = []
    for _ in range(k):
        counts = np.bincount(assign, minlength=k)
        if not _reseed(x, centers, assign, counts):
            break
        reseeded.append(True)
        assign = _assign(x, centers)
    inertia = _inertia(x, centers, assign)
    return ClusterResult(centers, assign, inertia, steps, [inertia], reseeded)
