"""Synthetic images, Netpbm IO, and the VQTF feature interchange format.

VQTF layout (little-endian)::

    magic   4s   b"VQTF"
    version u16  1
    rows    u64
    cols    u32
    taglen  u16, then the UTF-8 source tag
    data    rows * cols float32
"""

import json
import re
import struct
from dataclasses import dataclass

import numpy as np

from .clustering import SOURCES, FeatureSet

STYLES = ("blobs", "stripes", "checker", "mixed")


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    name: str = "synthetic"
    seed: int = 0
    split: str = "train"
    style: str = "mixed"

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=np.float32)
        if imgs.ndim != 4:
            raise ValueError(f"images must be (count, H, W, C), got {imgs.shape}")
        if imgs.size and (imgs.min() < 0.0 or imgs.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        self.images = imgs

    def __len__(self):
        return self.images.shape[0]

    @property
    def size(self):
        return self.images.shape[1]

    @property
    def channels(self):
        return self.images.shape[3]

    def manifest(self):
        return {"name": self.name, "seed": self.seed, "count": len(self),
                "size": self.size, "style": self.style, "split": self.split}


def _colors(rng, k, channels):
    return rng.uniform(0.0, 1.0, size=(k, channels))


def _blobs(rng, yy, xx, channels):
    size = yy.shape[0]
    img = np.broadcast_to(_colors(rng, 1, channels)[0], (size, size, channels)).copy()
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(-0.1, 1.1, size=2) * size
        sigma = rng.uniform(0.06, 0.25) * size
        alpha = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))[..., None]
        img = img * (1 - alpha) + _colors(rng, 1, channels)[0] * alpha
    return img


def _stripes(rng, yy, xx, channels):
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(3.0, 16.0)
    phase = rng.uniform(0, 2 * np.pi)
    s = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    if rng.random() < 0.5:
        s = (s > 0.5).astype(np.float64)
    c = _colors(rng, 2, channels)
    return c[0] * (1 - s[..., None]) + c[1] * s[..., None]


def _checker(rng, yy, xx, channels):
    cell = rng.uniform(3.0, 10.0)
    theta = rng.uniform(-0.4, 0.4)
    oy, ox = rng.uniform(0, cell, size=2)
    u = xx * np.cos(theta) + yy * np.sin(theta) + ox
    v = -xx * np.sin(theta) + yy * np.cos(theta) + oy
    parity = (np.floor(u / cell) + np.floor(v / cell)) % 2
    c = _colors(rng, 2, channels)
    return c[0] * (1 - parity[..., None]) + c[1] * parity[..., None]


_GENERATORS = {"blobs": _blobs, "stripes": _stripes, "checker": _checker}


def gen_synthetic(style, count, size, seed, channels=3, mix=None, name=None):
    """Procedural images in [0, 1].

    ``mixed`` draws a style per image, uniformly unless ``mix`` gives weights
    for (blobs, stripes, checker).
    """
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}; expected one of {STYLES}")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    names = ("blobs", "stripes", "checker")
    weights = np.asarray(mix if mix is not None else (1, 1, 1), dtype=np.float64)
    weights = weights / weights.sum()
    out = np.empty((count, size, size, channels), dtype=np.float32)
    for i in range(count):
        kind = names[rng.choice(3, p=weights)] if style == "mixed" else style
        out[i] = np.clip(_GENERATORS[kind](rng, yy, xx, channels), 0.0, 1.0)
    return Dataset(out, name or f"synthetic-{style}", seed, "train", style)


def split_dataset(ds, eval_fraction=0.1, seed=0):
    """Seeded shuffle into (train, eval); eval keeps at least one image."""
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n)
    n_eval = max(1, int(round(n * eval_fraction))) if n > 1 else 0
    ev, tr = order[:n_eval], order[n_eval:]
    return (Dataset(ds.images[np.sort(tr)], ds.name, ds.seed, "train", ds.style),
            Dataset(ds.images[np.sort(ev)], ds.name, ds.seed, "eval", ds.style))


def write_manifest(ds, path):
    with open(path, "w") as f:
        json.dump(ds.manifest(), f, indent=2, sort_keys=True)


# -- Netpbm ----------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_fields(buf, count):
    pos = 0
    fields = []
    for _ in range(count):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise DataFormatError("malformed Netpbm header")
        fields.append(m.group(1))
        pos = m.end()
    return fields, pos


def load_ppm(path):
    """Read a binary PPM (P6) or PGM (P5) with maxval <= 255 into [0, 1] floats."""
    with open(path, "rb") as f:
        buf = f.read()
    magic = buf[:2]
    if magic in (b"P1", b"P2", b"P3"):
        raise DataFormatError(f"ASCII Netpbm variant {magic.decode()} is not supported")
    if magic not in (b"P5", b"P6"):
        raise DataFormatError(f"not a binary PPM/PGM file (magic {magic!r})")
    try:
        (_, w, h, maxval), pos = _header_fields(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise DataFormatError("malformed Netpbm header") from None
    if w < 1 or h < 1 or not 0 < maxval <= 255:
        raise DataFormatError(f"unsupported header: {w}x{h}, maxval {maxval}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise DataFormatError("missing whitespace after maxval")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise DataFormatError(f"truncated pixel data: {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    return arr.astype(np.float32) / maxval


def save_ppm(img, path):
    """Write an H x W x C image in [0, 1]; C=3 gives P6, C=1 gives P5."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError("images must have 1 or 3 channels")
    data = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    magic = b"P6" if c == 3 else b"P5"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


# -- feature files ---------------------------------------------------------

FEATURE_MAGIC = b"VQTF"
FEATURE_VERSION = 1
_FEAT_HEADER = struct.Struct("<4sHQIH")


def save_feature_file(fs, path):
    tag = fs.source.encode("utf-8")
    rows, cols = fs.rows.shape
    with open(path, "wb") as f:
        f.write(_FEAT_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows, cols, len(tag)))
        f.write(tag)
        f.write(fs.rows.astype("<f4").tobytes())


def load_feature_file(path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _FEAT_HEADER.size:
        raise DataFormatError("truncated feature file header")
    magic, version, rows, cols, taglen = _FEAT_HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DataFormatError(f"unsupported feature file version {version}")
    off = _FEAT_HEADER.size
    tag = buf[off:off + taglen].decode("utf-8")
    off += taglen
    count = rows * cols
    if rows == 0 or cols == 0 or count * 4 > len(buf) - off:
        raise DataFormatError(f"shape {rows}x{cols} overflows the {len(buf) - off}-byte payload")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    source = tag if tag in SOURCES else "imported-file"
    return FeatureSet(data.astype(np.float32).reshape(rows, cols), source)


def extract_pixel_patch_features(ds, patch_size):
    """Non-overlapping patches, flattened and mean-centred per patch."""
    from .model import patchify

    if ds.size % patch_size:
        raise ValueError(f"image size {ds.size} is not divisible by patch size {patch_size}")
    rows = patchify(ds.images, patch_size).astype(np.float64)
    rows -= rows.mean(axis=1, keepdims=True)
    return FeatureSet(rows.astype(np.float32), "pixel-patch", ds.name, ds.seed)


def extract_encoder_features(model, ds, batch=256):
    """Encoder activations of a trained model, one row per patch token."""
    from .tensor import no_grad

    chunks = []
    with no_grad():
        for i in range(0, len(ds), batch):
            chunks.append(model.encode(ds.images[i:i + batch]).data)
    return FeatureSet(np.concatenate(chunks), "tiny-encoder", ds.name, ds.seed)
