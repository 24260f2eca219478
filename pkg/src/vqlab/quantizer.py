"""Quantization regimes and their shared nearest-entry search.

Four ways of maintaining the codebook are supported:

* ``GD``  trainable random codebook updated by gradient descent
* ``FC``  as GD, but features are first projected to a low dimension D'
* ``EMA`` random codebook moved by exponential moving averages of the
  features assigned to each entry; it never receives gradients
* ``LC``  frozen k-means codebook mapped through a trainable projector
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .codebook import Codebook, Projector
from .tensor import Tensor, add, custom_op, mse, scale, stop_gradient

VARIANTS = ("GD", "FC", "EMA", "LC")
METRICS = ("l2", "cosine")


class QuantizerError(ValueError):
    pass


@dataclass
class TokenMap:
    """Selected entry per token and its distance.

    Distances are Euclidean for ``l2`` and ``1 - cos`` (in [0, 2]) for
    ``cosine``.
    """

    indices: np.ndarray
    distances: np.ndarray
    codebook_size: int

    def reshape(self, *shape):
        return TokenMap(self.indices.reshape(shape), self.distances.reshape(shape), self.codebook_size)


@dataclass
class EmaStats:
    counts: np.ndarray
    sums: np.ndarray
    gamma: float = 0.99
    eps: float = 1e-5

    @classmethod
    def for_codebook(cls, codebook, gamma=0.99, eps=1e-5):
        # unit counts so each entry starts as its own running mean
        n = codebook.size
        return cls(np.ones(n), codebook.entries.astype(np.float64), gamma, eps)


@dataclass
class QuantizerState:
    variant: str
    codebook: Codebook
    projector: Optional[Projector] = None
    ema: Optional[EmaStats] = None
    metric: str = "l2"
    alpha: float = 1.0
    beta: float = 0.33

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise QuantizerError(f"unknown variant {self.variant!r}")
        if self.metric not in METRICS:
            raise QuantizerError(f"unknown metric {self.metric!r}")
        if self.alpha <= 0 or self.beta <= 0:
            raise QuantizerError("alpha and beta must be positive")
        if self.variant == "EMA" and self.ema is None:
            raise QuantizerError("EMA variant needs EmaStats")


def _array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    return x / np.where(norms > 0, norms, 1.0)[:, None]


def quantize(features, codebook, metric="l2", num_threads=1, backend=None):
    """Index of the nearest codebook row for every feature row.

    ``features`` is T x D', ``codebook`` N x D' (arrays or tensors). Ties go
    to the lowest index. Under ``cosine`` the rows are normalised first, so
    the choice is invariant to rescaling a feature row.
    """
    z = _array(features)
    b = _array(codebook)
    if b.ndim != 2 or b.shape[0] == 0:
        raise QuantizerError("empty codebook")
    if metric == "l2":
        idx, sq = kernels.nearest(z, b, num_threads=num_threads, backend=backend)
        dist = np.sqrt(sq)
    elif metric == "cosine":
        idx, sq = kernels.nearest(_unit_rows(z), _unit_rows(b), num_threads=num_threads, backend=backend)
        # ||u - v||^2 = 2 - 2 cos for unit rows
        dist = np.clip(sq / 2.0, 0.0, 2.0)
    else:
        raise QuantizerError(f"unknown metric {metric!r}")
    return TokenMap(idx, dist, b.shape[0])


def knn(features, codebook, m, metric="l2", num_threads=1, backend=None):
    """The ``m`` nearest entries per row, ascending by distance.

    Returns ``(indices, distances)``, both T x M. Column 0 equals
    :func:`quantize`.
    """
    z = _array(features)
    b = _array(codebook)
    if m > b.shape[0]:
        raise QuantizerError(f"M={m} exceeds codebook size {b.shape[0]}")
    if metric == "l2":
        idx, sq = kernels.knn(z, b, m, num_threads=num_threads, backend=backend)
        return idx, np.sqrt(sq)
    if metric == "cosine":
        idx, sq = kernels.knn(_unit_rows(z), _unit_rows(b), m, num_threads=num_threads, backend=backend)
        return idx, np.clip(sq / 2.0, 0.0, 2.0)
    raise QuantizerError(f"unknown metric {metric!r}")


def straight_through(z, z_q):
    """Forward ``z_q``; the backward pass hands the gradient to ``z`` unchanged."""
    if z.shape != z_q.shape:
        raise QuantizerError(f"straight_through: shapes {z.shape} and {z_q.shape}")
    return custom_op("straight_through", z_q.data.astype(z.dtype), (z, z_q), lambda g: (g, None))


def quantization_loss(variant, z_pre, z_q, alpha=1.0, beta=0.33):
    """Commitment terms pulling features and selected entries together.

    GD, FC and LC use ``alpha*mse(sg(z_q), z) + beta*mse(sg(z), z_q)``; EMA
    keeps only the first term since its codebook is not gradient-trained.
    """
    if z_pre.shape != z_q.shape:
        raise QuantizerError(f"quantization_loss: shapes {z_pre.shape} and {z_q.shape}")
    commit = scale(mse(stop_gradient(z_q), z_pre), alpha)
    if variant == "EMA":
        return commit
    if variant not in VARIANTS:
        raise QuantizerError(f"unknown variant {variant!r}")
    return add(commit, scale(mse(stop_gradient(z_pre), z_q), beta))


def ema_update(stats, codebook, token_map, features):
    """Move assigned entries toward the running mean of their features.

    ``counts`` and ``sums`` decay for every entry; only entries assigned at
    least one feature this step are rewritten, as ``sums / max(counts, eps)``.
    """
    if codebook.frozen:
        raise QuantizerError("EMA update on a frozen codebook")
    idx = token_map.indices if isinstance(token_map, TokenMap) else np.asarray(token_map)
    idx = idx.reshape(-1)
    z = np.asarray(_array(features), dtype=np.float64).reshape(idx.size, -1)
    n = codebook.size
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise QuantizerError("token index out of range")
    hits = np.bincount(idx, minlength=n).astype(np.float64)
    batch_sums = np.empty((n, z.shape[1]))
    for d in range(z.shape[1]):
        batch_sums[:, d] = np.bincount(idx, weights=z[:, d], minlength=n)
    g = stats.gamma
    stats.counts = g * stats.counts + (1.0 - g) * hits
    stats.sums = g * stats.sums + (1.0 - g) * batch_sums
    touched = hits > 0
    denom = np.maximum(stats.counts[touched], stats.eps)
    codebook.entries[touched] = (stats.sums[touched] / denom[:, None]).astype(np.float32)


def utilization_sets(token_maps, n):
    """Per-entry usage over a window of token maps.

    Returns ``(used, counts)``: ``used[i]`` is true when entry ``i`` was
    selected at least once.
    """
    counts = np.zeros(n, dtype=np.int64)
    for tm in token_maps:
        idx = tm.indices if isinstance(tm, TokenMap) else np.asarray(tm)
        idx = idx.reshape(-1)
        if idx.size and idx.max() >= n:
            raise QuantizerError("token index out of range")
        counts += np.bincount(idx, minlength=n)
    return counts > 0, counts


def utilization_rate(used):
    used = np.asarray(used)
    return float(used.sum()) / used.size
