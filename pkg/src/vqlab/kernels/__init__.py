"""Nearest-entry search kernels.

The compiled backend is used when it imports; otherwise the NumPy fallback.
Set ``VQLAB_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels

if _ckernels is not None and not os.environ.get("VQLAB_PURE_PYTHON"):
    BACKEND = "cython"
else:
    BACKEND = "python"


def _backend(name):
    name = name or BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available") from None


def _prepare(z, codebook):
    z = np.asarray(z)
    codebook = np.asarray(codebook)
    if z.ndim != 2 or codebook.ndim != 2:
        raise ValueError("features and codebook must be 2-D")
    if codebook.shape[0] == 0:
        raise ValueError("empty codebook")
    if z.shape[1] != codebook.shape[1]:
        raise ValueError(
            f"dimension mismatch: features have {z.shape[1]}, "
            f"codebook has {codebook.shape[1]}"
        )
    z = np.ascontiguousarray(z, dtype=np.float64)
    cb = codebook.astype(np.float64)
    bt = np.ascontiguousarray(cb.T)
    bn = np.einsum("ij,ij->i", cb, cb)
    return z, bt, bn


def _row_norms(z):
    return np.einsum("ij,ij->i", z, z)


def nearest(z, codebook, num_threads=1, backend=None):
    """Nearest codebook row per feature row under squared L2.

    Returns ``(indices, sq_distances)``; ties resolve to the lowest index.
    """
    z, bt, bn = _prepare(z, codebook)
    idx, score = _backend(backend).nearest(z, bt, bn, num_threads)
    dist = np.maximum(score + _row_norms(z), 0.0)
    return idx, dist


def knn(z, codebook, m, num_threads=1, backend=None):
    """The ``m`` nearest rows per feature row, sorted by squared L2."""
    z, bt, bn = _prepare(z, codebook)
    if m < 1 or m > bt.shape[1]:
        raise ValueError(f"M={m} must lie in [1, {bt.shape[1]}]")
    idx, score = _backend(backend).knn(z, bt, bn, int(m), num_threads)
    dist = np.maximum(score + _row_norms(z)[:, None], 0.0)
    return idx, dist
