"""Adam with linear warm-up and half-cycle cosine decay, and the training loop.

GD, FC and LC train every parameter the model exposes with Adam (for LC
that excludes the frozen codebook). EMA trains the network with Adam and
moves its codebook with :func:`vqlab.quantizer.ema_update` after each batch.
"""

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .data import split_dataset
from .model import ConfigError, VQModel, save_checkpoint
from .quantizer import ema_update, utilization_rate
from .tensor import NonFiniteError, Tape, backward


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    base_lr: float = 5e-4
    warmup_epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    eval_fraction: float = 0.1

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("train.epochs: must be >= 0")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("train.warmup_epochs: must lie in [0, train.epochs]")
        if self.base_lr <= 0:
            raise ConfigError("train.base_lr: must be positive")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size: must be >= 1")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("train.betas: expected two values in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("train.eps: must be positive")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError("train.eval_fraction: must lie in (0, 1)")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_at(step, steps_per_epoch, cfg):
    """Learning rate for update number ``step`` (1-based; 0 gives 0 during warm-up).

    Ramps as ``base_lr * step / warmup_steps``, reaching ``base_lr`` on the
    last warm-up step, then follows ``base_lr * 0.5 * (1 + cos(pi * t))``
    where ``t`` runs over (0, 1] across the remaining steps.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step <= warm:
        return cfg.base_lr * step / warm if warm else cfg.base_lr
    if total <= warm:
        return cfg.base_lr
    t = min(1.0, (step - warm) / (total - warm))
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def adam_step(params, grads, moments, lr, betas=(0.9, 0.999), eps=1e-8, names=None):
    """One bias-corrected Adam update, in place.

    ``moments`` is a dict holding ``t`` and per-parameter ``m``/``v``
    buffers; it is filled on first use. Parameters with a ``None`` gradient
    are skipped.
    """
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            label = names[i] if names else f"parameter {i}"
            raise FloatingPointError(f"non-finite gradient in {label}")
    b1, b2 = betas
    t = moments.get("t", 0) + 1
    moments["t"] = t
    m_all = moments.setdefault("m", {})
    v_all = moments.setdefault("v", {})
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        m = m_all.get(i)
        if m is None:
            m = m_all[i] = np.zeros(g.shape)
            v_all[i] = np.zeros(g.shape)
        v = v_all[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p[...] = (p - update).astype(p.dtype)


class Adam:
    """Adam over named tensors; reads and clears their ``grad`` slots."""

    def __init__(self, named_params, betas=(0.9, 0.999), eps=1e-8):
        self.named = list(named_params)
        self.betas = betas
        self.eps = eps
        self.moments = {}

    def step(self, lr):
        names = [n for n, _ in self.named]
        tensors = [t for _, t in self.named]
        adam_step([t.data for t in tensors], [t.grad for t in tensors], self.moments,
                  lr, self.betas, self.eps, names)
        for t in tensors:
            t.grad = None


CSV_FIELDS = (
    "epoch", "L_R", "L_Q", "loss", "epoch_utilization", "cumulative_utilization",
    "eval_mse", "eval_psnr", "eval_ssim", "wall_seconds",
)
TIMING_FIELDS = ("wall_seconds",)


@dataclass
class RunRecord:
    train_config: dict
    model_config: dict
    rows: list = field(default_factory=list)
    counts: np.ndarray = None
    data: dict = field(default_factory=dict)
    codebook_checksum: str = ""

    def add_row(self, row):
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epochs must be strictly increasing")
        for k in ("epoch_utilization", "cumulative_utilization"):
            if not 0.0 <= row[k] <= 1.0:
                raise ValueError(f"{k} out of [0, 1]: {row[k]}")
        self.rows.append(row)

    @property
    def final(self):
        return self.rows[-1] if self.rows else None

    def write_csv(self, path, include_timing=True):
        cols = [c for c in CSV_FIELDS if include_timing or c not in TIMING_FIELDS]
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["epoch"] if c == "epoch" else metrics.fmt(r[c]) for c in cols])

    def to_dict(self):
        return {
            "train_config": self.train_config,
            "model_config": self.model_config,
            "data": self.data,
            "codebook_checksum": self.codebook_checksum,
            "rows": self.rows,
        }

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def evaluate(model, ds, batch=250):
    """Reconstruction quality and token counts over a dataset."""
    n = model.codebook.size
    counts = np.zeros(n, dtype=np.int64)
    outs = []
    for i in range(0, len(ds), batch):
        x_hat, tm = model.reconstruct(ds.images[i:i + batch])
        outs.append(x_hat)
        counts += np.bincount(tm.indices, minlength=n)
    report = metrics.quality_report(np.concatenate(outs), ds.images)
    return report, counts


def train(data, cfg, model_cfg, codebook=None, eval_data=None, checkpoint=None,
          log=None):
    """Train a fresh model; returns ``(model, RunRecord)``.

    Without ``eval_data`` a seeded 90/10 split of ``data`` is used. Each
    epoch visits the training images in a fresh seeded order, keeping the
    last partial batch. A non-finite loss or gradient aborts with the epoch
    and step where it happened.
    """
    cfg.validate()
    model_cfg.validate()
    if len(data) == 0:
        raise ValueError("empty dataset")
    if eval_data is None:
        train_ds, eval_ds = split_dataset(data, cfg.eval_fraction, cfg.seed)
    else:
        train_ds, eval_ds = data, eval_data
    if len(train_ds) == 0:
        raise ValueError("no training images after the split")

    model = VQModel(model_cfg, codebook=codebook)
    n = model.codebook.size
    record = RunRecord(cfg.to_dict(), model_cfg.to_dict())
    record.data = {"train": train_ds.manifest(), "eval": eval_ds.manifest()}
    opt = Adam(model.named_parameters(), cfg.betas, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(train_ds) / cfg.batch_size)
    cumulative = np.zeros(n, dtype=np.int64)
    step = 0
    t0 = time.perf_counter()

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_ds))
        epoch_counts = np.zeros(n, dtype=np.int64)
        sums = np.zeros(3)
        seen = 0
        for s in range(steps_per_epoch):
            step += 1
            batch = train_ds.images[order[s * cfg.batch_size:(s + 1) * cfg.batch_size]]
            lr = lr_at(step, steps_per_epoch, cfg)
            try:
                with Tape():
                    res = model.forward_loss(batch)
                    loss = res.loss.item()
                    backward(res.loss)
                opt.step(lr)
            except (NonFiniteError, FloatingPointError) as exc:
                raise TrainingError(f"epoch {epoch}, step {step}: {exc}") from exc
            if model_cfg.variant == "EMA":
                ema_update(model.ema, model.codebook, res.token_map, res.z.data)
            epoch_counts += np.bincount(res.token_map.indices, minlength=n)
            k = len(batch)
            sums += k * np.array([res.parts["L_R"], res.parts["L_Q"], loss])
            seen += k
        cumulative += epoch_counts
        report, _ = evaluate(model, eval_ds)
        l_r, l_q, total = sums / seen
        record.add_row({
            "epoch": epoch,
            "L_R": float(l_r),
            "L_Q": float(l_q),
            "loss": float(total),
            "epoch_utilization": utilization_rate(epoch_counts > 0),
            "cumulative_utilization": utilization_rate(cumulative > 0),
            "eval_mse": report.mse,
            "eval_psnr": report.psnr,
            "eval_ssim": report.ssim,
            "wall_seconds": time.perf_counter() - t0,
        })
        if log is not None:
            r = record.rows[-1]
            log(f"epoch {epoch}/{cfg.epochs} L_R {r['L_R']:.5f} L_Q {r['L_Q']:.5f} "
                f"util {r['epoch_utilization']:.3f}/{r['cumulative_utilization']:.3f} "
                f"eval psnr {r['eval_psnr']:.2f}")

    record.counts = cumulative
    record.codebook_checksum = model.codebook.checksum()
    if checkpoint is not None:
        save_checkpoint(model, checkpoint)
    return model, record


__all__ = [
    "Adam",
    "RunRecord",
    "TrainConfig",
    "TrainingError",
    "adam_step",
    "evaluate",
    "lr_at",
    "train",
]
