"""Patch-MLP encoder, quantizer and decoder.

Images are cut into non-overlapping ``patch_size`` squares; each patch is one
token. The encoder is an MLP with leaky-ReLU hidden layers, the decoder
mirrors it and ends in a sigmoid so pixels stay in [0, 1].

VQMD checkpoint layout (little-endian)::

    magic    4s   b"VQMD"
    version  u16  1
    cfglen   u32, then the ModelConfig as UTF-8 JSON
    count    u32  number of parameter tensors, in declaration order
    per tensor: ndim u8, dims u32 * ndim, float32 data
    cblen    u64, then the embedded VQCB codebook file
"""

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import codebook as cbm
from .codebook import Codebook, Projector, kaiming_uniform
from .quantizer import (
    METRICS,
    VARIANTS,
    EmaStats,
    QuantizerState,
    TokenMap,
    quantization_loss,
    quantize,
    straight_through,
)
from .tensor import (
    Tensor,
    bias_add,
    gather_rows,
    leaky_relu,
    add,
    matmul,
    mse,
    no_grad,
    normalize_rows,
    reshape,
    sigmoid,
    transpose,
)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    enc_hidden: tuple = (128,)
    dec_hidden: tuple = (128,)
    feature_dim: int = 64
    variant: str = "LC"
    proj_dim: int = 8
    codebook_size: int = 4096
    alpha: float = 1.0
    beta: float = 0.33
    metric: str = "l2"
    slope: float = 0.2
    use_projector: bool = True
    projector_bias: bool = True
    codebook_trainable: bool = False
    fc_l2norm: bool = False
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.enc_hidden = tuple(int(h) for h in self.enc_hidden)
        self.dec_hidden = tuple(int(h) for h in self.dec_hidden)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant: expected one of {VARIANTS}, got {self.variant!r}")
        if self.metric not in METRICS:
            raise ConfigError(f"model.metric: expected one of {METRICS}, got {self.metric!r}")
        for name in ("image_size", "patch_size", "feature_dim", "proj_dim", "codebook_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name}: must be >= 1")
        if self.channels not in (1, 3):
            raise ConfigError("model.channels: must be 1 or 3")
        if self.image_size % self.patch_size:
            raise ConfigError("model.image_size: must be divisible by model.patch_size")
        if self.proj_dim > self.feature_dim and self.variant == "FC":
            raise ConfigError("model.proj_dim: must not exceed model.feature_dim")
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("model.alpha/model.beta: must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("model.ema_decay: must lie in [0, 1)")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def tokens_per_image(self):
        return self.grid**2

    @property
    def patch_dim(self):
        return self.patch_size**2 * self.channels

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["enc_hidden"] = list(self.enc_hidden)
        d["dec_hidden"] = list(self.dec_hidden)
        return d


def patchify(images, patch):
    """(B, H, W, C) -> (B*h*w, patch*patch*C), tokens in row-major grid order."""
    b, h, w, c = images.shape
    g, k = h // patch, w // patch
    x = images.reshape(b, g, patch, k, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b * g * k, patch * patch * c))


def unpatchify(tokens, batch, size, patch, channels):
    """Inverse of :func:`patchify` on tensors."""
    g = size // patch
    x = reshape(tokens, (batch, g, g, patch, patch, channels))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (batch, size, size, channels))


@dataclass
class ForwardResult:
    loss: Tensor
    parts: dict
    token_map: TokenMap
    x_hat: Tensor
    z: Tensor
    z_q: Tensor = field(repr=False, default=None)


class VQModel:
    """Encoder-quantizer-decoder with one of the four codebook regimes."""

    def __init__(self, config, codebook=None, projector=None, layers=None):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        v = config.variant

        if codebook is None:
            if v == "LC":
                raise ConfigError("LC variant needs a prebuilt codebook")
            dim = config.proj_dim if v == "FC" else config.feature_dim
            codebook = cbm.init_random(config.codebook_size, dim, int(rng.integers(2**31)), frozen=False)
        if v in ("GD", "FC", "EMA"):
            codebook.frozen = False
        elif v == "LC":
            codebook.frozen = not config.codebook_trainable
        self.codebook = codebook

        use_proj = v == "LC" and config.use_projector
        if use_proj and projector is None:
            projector = Projector.create(codebook.dim, config.proj_dim, int(rng.integers(2**31)),
                                         bias=config.projector_bias)
        self.projector = projector if use_proj else None

        if v in ("GD", "EMA"):
            self.latent_dim = config.feature_dim
        elif v == "FC":
            self.latent_dim = config.proj_dim
        else:
            self.latent_dim = config.proj_dim if use_proj else codebook.dim
        expected = self.projector.in_dim if use_proj else self.latent_dim
        if codebook.dim != expected:
            raise ConfigError(f"codebook dimension {codebook.dim} does not match expected {expected}")

        # shares memory with codebook.entries so EMA and optimizer updates land in both
        trainable = v in ("GD", "FC") or (v == "LC" and config.codebook_trainable)
        self.codebook_tensor = Tensor(codebook.entries, requires_grad=trainable, name="codebook")
        codebook.entries = self.codebook_tensor.data

        self.ema = (EmaStats.for_codebook(codebook, config.ema_decay, config.ema_eps)
                    if v == "EMA" else None)

        if layers is None:
            layers = self._init_layers(rng)
        self.layers = layers

    def _init_layers(self, rng):
        cfg = self.config
        layers = {}

        def linear(name, fan_in, fan_out):
            layers[name + ".weight"] = Tensor(kaiming_uniform(fan_in, fan_out, rng, cfg.slope),
                                              requires_grad=True, name=name + ".weight")
            layers[name + ".bias"] = Tensor(np.zeros(fan_out, dtype=np.float32),
                                            requires_grad=True, name=name + ".bias")

        width = cfg.patch_dim
        for i, h in enumerate(cfg.enc_hidden):
            linear(f"enc.{i}", width, h)
            width = h
        enc_out = cfg.feature_dim if cfg.variant in ("GD", "EMA", "FC") else self.latent_dim
        linear(f"enc.{len(cfg.enc_hidden)}", width, enc_out)
        if cfg.variant == "FC":
            linear("fc_proj", cfg.feature_dim, cfg.proj_dim)
        width = self.latent_dim
        for i, h in enumerate(cfg.dec_hidden):
            linear(f"dec.{i}", width, h)
            width = h
        linear(f"dec.{len(cfg.dec_hidden)}", width, cfg.patch_dim)
        return layers

    # -- parameters -------------------------------------------------------

    def named_parameters(self):
        """Trainable tensors in declaration order."""
        out = list(self.layers.items())
        if self.projector is not None:
            out.append(("projector.weight", self.projector.weight))
            if self.projector.bias is not None:
                out.append(("projector.bias", self.projector.bias))
        if self.codebook_tensor.requires_grad:
            out.append(("codebook", self.codebook_tensor))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    @property
    def state(self):
        cfg = self.config
        return QuantizerState(cfg.variant, self.codebook, self.projector, self.ema,
                              cfg.metric, cfg.alpha, cfg.beta)

    # -- forward ----------------------------------------------------------

    def _mlp(self, x, prefix, n_hidden, final_act=None):
        slope = self.config.slope
        for i in range(n_hidden + 1):
            x = bias_add(matmul(x, self.layers[f"{prefix}.{i}.weight"]), self.layers[f"{prefix}.{i}.bias"])
            if i < n_hidden:
                x = leaky_relu(x, slope)
        return final_act(x) if final_act is not None else x

    def _as_batch(self, images):
        x = np.asarray(images, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        cfg = self.config
        if x.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ValueError(
                f"expected images of shape ({cfg.image_size}, {cfg.image_size}, {cfg.channels}), "
                f"got {x.shape[1:]}"
            )
        return x

    def encode(self, images):
        """Pre-quantization features, one row per patch token."""
        x = self._as_batch(images)
        tokens = Tensor(patchify(x, self.config.patch_size) - 0.5)
        z = self._mlp(tokens, "enc", len(self.config.enc_hidden))
        if self.config.variant == "FC":
            z = bias_add(matmul(z, self.layers["fc_proj.weight"]), self.layers["fc_proj.bias"])
            if self.config.fc_l2norm:
                z = normalize_rows(z)
        return z

    def effective_codebook(self):
        """The codebook the search runs against (projected for LC)."""
        if self.projector is not None:
            return cbm.project(self.codebook_tensor, self.projector)
        if self.config.variant == "FC" and self.config.fc_l2norm:
            return normalize_rows(self.codebook_tensor)
        return self.codebook_tensor

    def decode(self, z_q, batch=None):
        cfg = self.config
        if z_q.ndim != 2 or z_q.shape[1] != self.latent_dim or z_q.shape[0] % cfg.tokens_per_image:
            raise ValueError(f"decoder expects (k*{cfg.tokens_per_image}, {self.latent_dim}), got {z_q.shape}")
        if batch is None:
            batch = z_q.shape[0] // cfg.tokens_per_image
        out = self._mlp(z_q, "dec", len(cfg.dec_hidden), sigmoid)
        return unpatchify(out, batch, cfg.image_size, cfg.patch_size, cfg.channels)

    def _select(self, z, book, indices):
        cfg = self.config
        if indices is None:
            tm = quantize(z, book, cfg.metric)
        else:
            idx = np.asarray(indices, dtype=np.int64).reshape(-1)
            tm = TokenMap(idx, np.zeros(idx.size), book.shape[0])
        return tm, gather_rows(book, tm.indices)

    def forward_loss(self, images, indices=None):
        """Full loss ``mse(x_hat, x) + L_Q`` for a batch.

        ``indices`` pins the token choice (used when gradient checking).
        """
        x = self._as_batch(images)
        z = self.encode(x)
        book = self.effective_codebook()
        tm, z_q = self._select(z, book, indices)
        l_q = quantization_loss(self.config.variant, z, z_q, self.config.alpha, self.config.beta)
        x_hat = self.decode(straight_through(z, z_q), batch=x.shape[0])
        l_r = mse(x_hat, Tensor(x))
        loss = add(l_r, l_q)
        parts = {"L_R": l_r.item(), "L_Q": l_q.item()}
        return ForwardResult(loss, parts, tm, x_hat, z, z_q)

    def reconstruct(self, images, token_indices=None):
        """Decode without recording; returns (x_hat array, token map)."""
        with no_grad():
            x = self._as_batch(images)
            z = self.encode(x)
            book = self.effective_codebook()
            tm, z_q = self._select(z, book, token_indices)
            x_hat = self.decode(z_q, batch=x.shape[0])
        return x_hat.data, tm


# -- checkpoints -------------------------------------------------------------

MAGIC = b"VQMD"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path):
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    params = [(n, p) for n, p in model.named_parameters() if n != "codebook"]
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(cfg)), cfg, struct.pack("<I", len(params))]
    for _, p in params:
        chunks.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(p.data.astype("<f4").tobytes())
    blob = cbm.codebook_to_bytes(model.codebook)
    chunks.append(struct.pack("<Q", len(blob)))
    chunks.append(blob)
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    try:
        return _parse_checkpoint(buf)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None


def _parse_checkpoint(buf):
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}")
    version, cfglen = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 10
    cfg_dict = json.loads(buf[off:off + cfglen].decode("utf-8"))
    off += cfglen
    config = ModelConfig(**cfg_dict)
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(shape))
        if off + 4 * n > len(buf):
            raise CheckpointError("truncated parameter data")
        arrays.append(np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape))
        off += 4 * n
    (cblen,) = struct.unpack_from("<Q", buf, off)
    off += 8
    codebook = cbm.codebook_from_bytes(buf[off:off + cblen])

    model = VQModel(config, codebook=codebook)
    names = [n for n, _ in model.named_parameters() if n != "codebook"]
    if len(names) != len(arrays):
        raise CheckpointError(f"expected {len(names)} parameter tensors, found {len(arrays)}")
    lookup = dict(model.named_parameters())
    for name, arr in zip(names, arrays):
        t = lookup[name]
        if t.shape != arr.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} does not match {t.shape}")
        t.data[...] = arr
    return model
