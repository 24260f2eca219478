"""Codebook construction, projection and the VQCB file format.

VQCB layout (little-endian)::

    magic   4s   b"VQCB"
    version u16  1
    flags   u16  bit 0 = frozen
    n       u32
    dim     u32
    init    u8   0 random-init, 1 random-selection, 2 kmeans
    seed    u64
    idlen   u32  length of the UTF-8 dataset id
    id      idlen bytes
    data    n * dim float32
"""

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import clustering
from .tensor import Tensor, bias_add, matmul

INIT_STRATEGIES = ("random-init", "random-selection", "kmeans")

MAGIC = b"VQCB"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIBQI")
_FLAG_FROZEN = 1


class CodebookFormatError(ValueError):
    pass


@dataclass
class Codebook:
    entries: np.ndarray
    frozen: bool = True
    init_strategy: str = "kmeans"
    source_dataset: str = ""
    seed: int = 0

    def __post_init__(self):
        e = np.asarray(self.entries)
        if e.ndim != 2 or e.shape[0] < 1 or e.shape[1] < 1:
            raise ValueError(f"codebook must be N x D with N >= 1, got {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("codebook contains NaN or Inf")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ValueError(f"unknown init strategy {self.init_strategy!r}")
        self.entries = np.ascontiguousarray(e, dtype=np.float32)

    @property
    def size(self):
        return self.entries.shape[0]

    @property
    def dim(self):
        return self.entries.shape[1]

    def checksum(self):
        return hashlib.sha256(self.entries.tobytes()).hexdigest()


def kaiming_uniform(fan_in, fan_out, rng, slope=0.2):
    gain = np.sqrt(2.0 / (1.0 + slope**2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


class Projector:
    """Linear map from codebook space (D) to the latent space (D')."""

    def __init__(self, weight, bias=None):
        self.weight = weight if isinstance(weight, Tensor) else Tensor(weight, requires_grad=True)
        if bias is not None and not isinstance(bias, Tensor):
            bias = Tensor(bias, requires_grad=True)
        self.bias = bias
        if self.weight.ndim != 2 or self.weight.shape[1] < 1:
            raise ValueError(f"projector weight must be D x D', got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[1],):
            raise ValueError("projector bias must have length D'")

    @classmethod
    def create(cls, in_dim, out_dim, seed, bias=True):
        rng = np.random.default_rng(seed)
        w = kaiming_uniform(in_dim, out_dim, rng)
        b = np.zeros(out_dim, dtype=np.float32) if bias else None
        return cls(w, b)

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


def init_random(n, dim, seed, frozen=True, source_dataset=""):
    """Entries i.i.d. uniform in [-1/N, 1/N]."""
    if n < 1 or dim < 1:
        raise ValueError("N and D must be >= 1")
    rng = np.random.default_rng(seed)
    entries = rng.uniform(-1.0 / n, 1.0 / n, size=(n, dim)).astype(np.float32)
    return Codebook(entries, frozen, "random-init", source_dataset, seed)


def init_random_selection(features, n, seed, frozen=True):
    """N distinct feature rows sampled without replacement."""
    rows = features.rows
    if n > rows.shape[0]:
        raise ValueError(f"N={n} exceeds feature count {rows.shape[0]}")
    rng = np.random.default_rng(seed)
    pick = rng.choice(rows.shape[0], size=n, replace=False)
    return Codebook(rows[pick].copy(), frozen, "random-selection", features.dataset_id, seed)


def init_kmeans(features, n, seed, minibatch=False, frozen=True, max_iters=100,
                tol=1e-4, batch=4096, steps=200):
    """Cluster centers of ``features`` as codebook entries."""
    if n > len(features):
        raise ValueError(f"N={n} exceeds feature count {len(features)}")
    if minibatch:
        result = clustering.minibatch_kmeans_fit(features, n, batch=batch, steps=steps, seed=seed)
    else:
        result = clustering.kmeans_fit(features, n, max_iters=max_iters, tol=tol, seed=seed)
    return Codebook(result.centers, frozen, "kmeans", features.dataset_id, seed)


def project(codebook, projector):
    """Row-wise affine map ``entries @ W + b`` as a differentiable tensor.

    ``codebook`` may be a :class:`Codebook` (treated as a constant) or a
    :class:`Tensor` (trainable ablation). Gradients reach the projector and,
    only if the tensor requires grad, the entries.
    """
    b = codebook if isinstance(codebook, Tensor) else Tensor(codebook.entries)
    if projector.weight.shape[0] != b.shape[1]:
        raise ValueError(
            f"projector expects dimension {projector.weight.shape[0]}, codebook has {b.shape[1]}"
        )
    out = matmul(b, projector.weight)
    if projector.bias is not None:
        out = bias_add(out, projector.bias)
    return out


def codebook_to_bytes(cb):
    ident = cb.source_dataset.encode("utf-8")
    flags = _FLAG_FROZEN if cb.frozen else 0
    header = _HEADER.pack(
        MAGIC, VERSION, flags, cb.size, cb.dim,
        INIT_STRATEGIES.index(cb.init_strategy), cb.seed, len(ident),
    )
    return header + ident + cb.entries.astype("<f4").tobytes()


def codebook_from_bytes(buf):
    buf = memoryview(buf)
    if len(buf) < _HEADER.size:
        raise CodebookFormatError("truncated codebook header")
    magic, version, flags, n, dim, tag, seed, idlen = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CodebookFormatError(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise CodebookFormatError(f"unsupported codebook version {version}")
    if tag >= len(INIT_STRATEGIES):
        raise CodebookFormatError(f"unknown init-strategy tag {tag}")
    off = _HEADER.size
    need = off + idlen + 4 * n * dim
    if len(buf) < need:
        raise CodebookFormatError(f"truncated codebook: {len(buf)} bytes, expected {need}")
    if len(buf) > need:
        raise CodebookFormatError("trailing bytes after codebook payload")
    ident = bytes(buf[off:off + idlen]).decode("utf-8")
    data = np.frombuffer(buf, dtype="<f4", count=n * dim, offset=off + idlen)
    entries = data.astype(np.float32).reshape(n, dim)
    return Codebook(entries, bool(flags & _FLAG_FROZEN), INIT_STRATEGIES[tag], ident, seed)


def save_codebook(cb, path):
    with open(path, "wb") as f:
        f.write(codebook_to_bytes(cb))


def load_codebook(path):
    with open(path, "rb") as f:
        return codebook_from_bytes(f.read())
