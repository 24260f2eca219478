"""Experiment configs and the studies behind each CLI subcommand.

A config is a JSON object with up to six sections, each optional::

    {"data": {...}, "model": {...}, "train": {...}, "codebook": {...},
     "experiment": {...}, "source_data": {...}}

``model`` and ``train`` take the fields of :class:`ModelConfig` and
:class:`TrainConfig`. Unknown keys are rejected with their dotted path.
Every summary CSV shares :data:`SUMMARY_FIELDS` so results from different
studies can be joined.
"""

import copy
import csv
import dataclasses
import json
import os
import time

import numpy as np

from . import codebook as cbm
from . import data as dio
from . import metrics
from .clustering import FeatureSet
from .model import ConfigError, ModelConfig, VQModel, load_checkpoint
from .quantizer import knn, quantize
from .trainer import TrainConfig, evaluate, train

DATA_DEFAULTS = {
    "style": "mixed",
    "count": 5000,
    "size": 32,
    "seed": 0,
    "channels": 3,
    "mix": None,
    "name": None,
}

CODEBOOK_DEFAULTS = {
    "init": "kmeans",
    "source": "pixel-patch",
    "feature_file": None,
    "sample_rows": 50000,
    "max_iters": 20,
    "tol": 1e-4,
    "minibatch": False,
    "encoder_epochs": 1,
    "seed": 0,
}

EXPERIMENT_DEFAULTS = {
    "sizes": [256, 1024, 4096],
    "variants": ["LC"],
    "strategies": ["random-init", "random-selection", "kmeans"],
    "dims": [8, 16, 32],
    "M": [1, 2, 8, 32],
    "checkpoint": None,
    "samples": 4,
    "bench_sizes": [1000, 10000, 100000],
    "bench_tokens": 10000,
    "bench_dim": 8,
    "bench_threads": 1,
    "bench_repeats": 3,
    "bench_batch": 32,
}

SECTIONS = ("data", "model", "train", "codebook", "experiment", "source_data")

SUMMARY_FIELDS = ("setting", "variant", "N", "D'", "utilization", "mse", "psnr", "ssim", "seed")


def _fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _merge(section, given, defaults):
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigError(f"{section}: expected an object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}: unknown field")
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(given))
    return out


@dataclasses.dataclass
class Experiment:
    data: dict
    model: ModelConfig
    train: TrainConfig
    codebook: dict
    experiment: dict
    source_data: dict

    def to_dict(self):
        return {
            "data": self.data,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "codebook": self.codebook,
            "experiment": self.experiment,
            "source_data": self.source_data,
        }

    def replace(self, model=None, train=None, codebook=None, data=None):
        """Copy with some fields of the given sections overridden."""
        m = dataclasses.replace(self.model, **(model or {}))
        t = dataclasses.replace(self.train, **(train or {}))
        cb = dict(self.codebook, **(codebook or {}))
        d = dict(self.data, **(data or {}))
        return Experiment(d, m, t, cb, copy.deepcopy(self.experiment), copy.deepcopy(self.source_data))


def _build(cls, section, values):
    unknown = sorted(set(values) - _fields(cls))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}: unknown field")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _check_data(section, d):
    if d["style"] not in dio.STYLES:
        raise ConfigError(f"{section}.style: expected one of {dio.STYLES}")
    for k in ("count", "size"):
        if not isinstance(d[k], int) or d[k] < 1:
            raise ConfigError(f"{section}.{k}: must be a positive integer")
    if d["channels"] not in (1, 3):
        raise ConfigError(f"{section}.channels: must be 1 or 3")
    if d["mix"] is not None and (len(d["mix"]) != 3 or min(d["mix"]) < 0 or sum(d["mix"]) <= 0):
        raise ConfigError(f"{section}.mix: expected three non-negative weights")


def load_config(obj, seed=None):
    """Validate a config dict (or JSON path) into an :class:`Experiment`.

    ``seed`` overrides the model, training and codebook seeds; dataset seeds
    stay as configured since they define the data itself.
    """
    if isinstance(obj, (str, os.PathLike)):
        with open(obj) as f:
            try:
                obj = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise ConfigError("config: expected a JSON object")
    unknown = sorted(set(obj) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section")
    d = _merge("data", obj.get("data"), DATA_DEFAULTS)
    _check_data("data", d)
    src = obj.get("source_data")
    src = _merge("source_data", src, DATA_DEFAULTS) if src is not None else None
    if src is not None:
        _check_data("source_data", src)
    cb = _merge("codebook", obj.get("codebook"), CODEBOOK_DEFAULTS)
    if cb["init"] not in cbm.INIT_STRATEGIES:
        raise ConfigError(f"codebook.init: expected one of {cbm.INIT_STRATEGIES}")
    if cb["source"] not in ("pixel-patch", "tiny-encoder", "file"):
        raise ConfigError("codebook.source: expected pixel-patch, tiny-encoder or file")
    if cb["source"] == "file" and not cb["feature_file"]:
        raise ConfigError("codebook.feature_file: required when codebook.source is 'file'")
    ex = _merge("experiment", obj.get("experiment"), EXPERIMENT_DEFAULTS)
    m = _merge("model", obj.get("model"), dataclasses.asdict(ModelConfig()))
    t = _merge("train", obj.get("train"), dataclasses.asdict(TrainConfig()))
    if seed is not None:
        m["seed"] = t["seed"] = cb["seed"] = int(seed)
    model = _build(ModelConfig, "model", m)
    tcfg = _build(TrainConfig, "train", t)
    if model.image_size != d["size"]:
        raise ConfigError("model.image_size: must equal data.size")
    if model.channels != d["channels"]:
        raise ConfigError("model.channels: must equal data.channels")
    for k in ("sizes", "dims", "M", "bench_sizes"):
        vals = ex[k]
        if not isinstance(vals, list) or not vals or any(not isinstance(v, int) or v < 1 for v in vals):
            raise ConfigError(f"experiment.{k}: expected a non-empty list of positive integers")
    if ex["sizes"] != sorted(ex["sizes"]):
        raise ConfigError("experiment.sizes: must be ascending")
    bad = [s for s in ex["strategies"] if s not in cbm.INIT_STRATEGIES]
    if bad:
        raise ConfigError(f"experiment.strategies: unknown strategy {bad[0]!r}")
    return Experiment(d, model, tcfg, cb, ex, src)


# -- data and codebooks --------------------------------------------------------

_DATA_CACHE = {}
_CODEBOOK_CACHE = {}
_RUN_CACHE = {}


def _key(*parts):
    return json.dumps(parts, sort_keys=True, default=str)


def make_dataset(dcfg, eval_fraction):
    """(train, eval) for a data section, cached per process.

    The split is seeded by the data seed, so the eval set belongs to the data
    and does not move when only the training seed changes.
    """
    key = _key(dcfg, eval_fraction)
    if key not in _DATA_CACHE:
        ds = dio.gen_synthetic(dcfg["style"], dcfg["count"], dcfg["size"], dcfg["seed"],
                               dcfg["channels"], dcfg["mix"], dcfg["name"])
        _DATA_CACHE[key] = dio.split_dataset(ds, eval_fraction, dcfg["seed"])
    return _DATA_CACHE[key]


def _features(exp, train_ds):
    cb = exp.codebook
    if cb["source"] == "file":
        return dio.load_feature_file(cb["feature_file"])
    if cb["source"] == "tiny-encoder":
        enc_cfg = dataclasses.replace(exp.model, variant="GD", seed=cb["seed"])
        tcfg = dataclasses.replace(exp.train, epochs=cb["encoder_epochs"], warmup_epochs=0)
        probe = dio.Dataset(train_ds.images[:16], train_ds.name, train_ds.seed, "eval")
        model, _ = train(train_ds, tcfg, enc_cfg, eval_data=probe)
        return dio.extract_encoder_features(model, train_ds)
    return dio.extract_pixel_patch_features(train_ds, exp.model.patch_size)


def build_codebook(exp, train_ds, n=None, dim=None):
    """Codebook for an LC-regime run, cached by data, codebook section and size.

    K-means runs on a seeded subsample of ``codebook.sample_rows`` feature
    rows. ``random-init`` needs only ``dim``.
    """
    cb = exp.codebook
    n = n or exp.model.codebook_size
    key = _key(train_ds.manifest(), cb, n, dim, exp.model.patch_size)
    if key in _CODEBOOK_CACHE:
        return copy.deepcopy(_CODEBOOK_CACHE[key])
    if cb["init"] == "random-init" and dim is not None:
        book = cbm.init_random(n, dim, cb["seed"], source_dataset=train_ds.name)
    else:
        fs = _features(exp, train_ds)
        rows = fs.rows
        if cb["sample_rows"] and len(rows) > cb["sample_rows"]:
            pick = np.random.default_rng(cb["seed"]).choice(len(rows), cb["sample_rows"], replace=False)
            rows = rows[np.sort(pick)]
        fs = FeatureSet(rows, fs.source, train_ds.name, cb["seed"])
        if cb["init"] == "kmeans":
            book = cbm.init_kmeans(fs, n, cb["seed"], minibatch=cb["minibatch"],
                                   max_iters=cb["max_iters"], tol=cb["tol"])
        elif cb["init"] == "random-selection":
            book = cbm.init_random_selection(fs, n, cb["seed"])
        else:
            book = cbm.init_random(n, fs.dim, cb["seed"], source_dataset=train_ds.name)
    _CODEBOOK_CACHE[key] = copy.deepcopy(book)
    return book


def _feature_dim(exp, train_ds):
    if exp.codebook["source"] == "pixel-patch":
        return exp.model.patch_dim
    if exp.codebook["source"] == "tiny-encoder":
        return exp.model.feature_dim
    return None


def run(exp, data_section=None, log=None):
    """Train one configuration; returns ``(model, record)``. Cached per process."""
    if data_section == exp.data:
        data_section = None
    cfg = exp.to_dict()
    key = _key(cfg["data"], cfg["model"], cfg["train"], cfg["codebook"], data_section)
    if key in _RUN_CACHE:
        return _RUN_CACHE[key]
    train_ds, eval_ds = make_dataset(exp.data, exp.train.eval_fraction)
    book = None
    if exp.model.variant == "LC":
        src_train = train_ds
        if data_section is not None:
            src_train, _ = make_dataset(data_section, exp.train.eval_fraction)
        book = build_codebook(exp, src_train, dim=_feature_dim(exp, src_train))
    result = train(train_ds, exp.train, exp.model, codebook=book, eval_data=eval_ds, log=log)
    _RUN_CACHE[key] = result
    return result


def clear_caches():
    _DATA_CACHE.clear()
    _CODEBOOK_CACHE.clear()
    _RUN_CACHE.clear()


# -- summaries -----------------------------------------------------------------

def summary_row(setting, exp, record, model):
    final = record.final or {}
    latent = model.latent_dim
    return {
        "setting": setting,
        "variant": exp.model.variant,
        "N": exp.model.codebook_size,
        "D'": latent,
        "utilization": final.get("cumulative_utilization", 0.0),
        "mse": final.get("eval_mse", float("nan")),
        "psnr": final.get("eval_psnr", float("nan")),
        "ssim": final.get("eval_ssim", float("nan")),
        "seed": exp.train.seed,
    }


def write_summary(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for r in rows:
            w.writerow([metrics.fmt(r[k]) if isinstance(r[k], float) else r[k] for k in SUMMARY_FIELDS])


def read_summary(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        for k in ("N", "D'", "seed"):
            r[k] = int(r[k])
        for k in ("utilization", "mse", "psnr", "ssim"):
            r[k] = float(r[k])
    return rows


def _write_run(out, model, record):
    from .model import save_checkpoint

    record.write_csv(os.path.join(out, "run.csv"))
    record.write_json(os.path.join(out, "run.json"))
    save_checkpoint(model, os.path.join(out, "model.vqmd"))
    metrics.export_code_activity(record.counts, os.path.join(out, "code_activity.csv"))


# -- studies -------------------------------------------------------------------

def cmd_train(exp, out, log=None):
    model, record = run(exp, log=log)
    _write_run(out, model, record)
    return record


def cmd_sweep_codebook(exp, out, log=None):
    rows = []
    for variant in exp.experiment["variants"]:
        for n in exp.experiment["sizes"]:
            e = exp.replace(model={"variant": variant, "codebook_size": n})
            model, record = run(e, log=log)
            rows.append(summary_row(f"N={n}", e, record, model))
    write_summary(rows, os.path.join(out, "summary.csv"))
    return rows


def cmd_ablate_init(exp, out, log=None):
    rows = []
    for strategy in exp.experiment["strategies"]:
        e = exp.replace(model={"variant": "LC", "use_projector": True, "codebook_trainable": False},
                        codebook={"init": strategy})
        model, record = run(e, log=log)
        rows.append(summary_row(strategy, e, record, model))
    write_summary(rows, os.path.join(out, "summary.csv"))
    return rows


def cmd_ablate_projector(exp, out, log=None):
    grid = (
        ("static+no-projector", {"use_projector": False, "codebook_trainable": False}),
        ("trainable+projector", {"use_projector": True, "codebook_trainable": True}),
        ("static+projector", {"use_projector": True, "codebook_trainable": False}),
    )
    rows = []
    for name, over in grid:
        e = exp.replace(model=dict(over, variant="LC"))
        model, record = run(e, log=log)
        rows.append(summary_row(name, e, record, model))
    write_summary(rows, os.path.join(out, "summary.csv"))
    return rows


def cmd_ablate_dim(exp, out, log=None):
    rows = []
    for dim in sorted(exp.experiment["dims"]):
        e = exp.replace(model={"variant": "LC", "proj_dim": dim})
        model, record = run(e, log=log)
        rows.append(summary_row(f"D'={dim}", e, record, model))
    write_summary(rows, os.path.join(out, "summary.csv"))
    return rows


def cmd_transfer(exp, out, log=None):
    """Codebook from each dataset, always trained and evaluated on ``data``."""
    if exp.source_data is None:
        raise ConfigError("source_data: required for transfer")
    e = exp.replace(model={"variant": "LC"})
    rows = []
    for name, section in (("same-dataset", e.data), ("cross-dataset", e.source_data)):
        model, record = run(e, data_section=section, log=log)
        rows.append(summary_row(name, e, record, model))
    write_summary(rows, os.path.join(out, "summary.csv"))
    return rows


def token_replace(model, eval_ds, m_list, batch=250):
    """Per-M reconstruction quality when every token uses its M-th nearest entry.

    Returns ``(rows, samples)`` where ``samples[M]`` holds the first
    reconstructions for inspection.
    """
    n = model.codebook.size
    bad = [m for m in m_list if m > n]
    if bad:
        raise ValueError(f"M={bad[0]} exceeds codebook size {n}")
    from .tensor import no_grad

    m_max = max(m_list)
    with no_grad():
        book = model.effective_codebook().data
        neighbours = []
        for i in range(0, len(eval_ds), batch):
            z = model.encode(eval_ds.images[i:i + batch]).data
            idx, _ = knn(z, book, m_max, model.config.metric)
            neighbours.append(idx)
    neighbours = np.concatenate(neighbours)
    tpi = model.config.tokens_per_image
    rows, samples = [], {}
    for m in m_list:
        outs = []
        for i in range(0, len(eval_ds), batch):
            sel = neighbours[i * tpi:(i + batch) * tpi, m - 1]
            x_hat, _ = model.reconstruct(eval_ds.images[i:i + batch], token_indices=sel)
            outs.append(x_hat)
        x_hat = np.concatenate(outs)
        rep = metrics.quality_report(x_hat, eval_ds.images)
        rows.append({"M": m, "mse": rep.mse, "psnr": rep.psnr, "ssim": rep.ssim})
        samples[m] = x_hat
    return rows, samples


def cmd_token_replace(exp, out, log=None):
    ckpt = exp.experiment["checkpoint"]
    if ckpt:
        model = load_checkpoint(ckpt)
    else:
        model, _ = run(exp, log=log)
    _, eval_ds = make_dataset(exp.data, exp.train.eval_fraction)
    base, _ = evaluate(model, eval_ds)
    rows, samples = token_replace(model, eval_ds, exp.experiment["M"])
    with open(os.path.join(out, "token_replace.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["M", "mse", "psnr", "ssim", "baseline_psnr"])
        for r in rows:
            w.writerow([r["M"], metrics.fmt(r["mse"]), metrics.fmt(r["psnr"]), metrics.fmt(r["ssim"]),
                        metrics.fmt(base.psnr)])
    k = min(exp.experiment["samples"], len(eval_ds))
    for i in range(k):
        dio.save_ppm(eval_ds.images[i], os.path.join(out, f"sample{i}_input.ppm"))
        for m, x_hat in samples.items():
            dio.save_ppm(x_hat[i], os.path.join(out, f"sample{i}_M{m}.ppm"))
    return rows, base


def bench_quantize(sizes, tokens, dim, threads=1, repeats=3, seed=0, backend=None):
    """Best-of-``repeats`` wall time of :func:`quantize` per codebook size."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((tokens, dim)).astype(np.float32)
    rows = []
    for n in sizes:
        book = rng.standard_normal((n, dim)).astype(np.float32)
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            quantize(z, book, num_threads=threads, backend=backend)
            best = min(best, time.perf_counter_ns() - t0)
        rows.append({"N": n, "tokens": tokens, "dim": dim, "wall_ns": int(best),
                     "tokens_per_sec": tokens / (best * 1e-9)})
    return rows


def quantize_share(exp, n, batch=32, repeats=3, seed=0):
    """Seconds per LC ``forward_loss`` at codebook size ``n``, and the share
    of that spent in the nearest-entry search (timed on the same inputs)."""
    from .tensor import Tape, no_grad

    rng = np.random.default_rng(seed)
    cfg = dataclasses.replace(exp.model, variant="LC", codebook_size=n, use_projector=True)
    book = cbm.Codebook(rng.standard_normal((n, cfg.patch_dim)).astype(np.float32))
    model = VQModel(cfg, codebook=book)
    x = rng.uniform(0, 1, size=(batch, cfg.image_size, cfg.image_size, cfg.channels)).astype(np.float32)
    with no_grad():
        z = model.encode(x).data
        proj = model.effective_codebook().data
    step = search = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        with Tape() as tape:
            model.forward_loss(x)
            tape.clear()
        step = min(step, time.perf_counter() - t0)
        t0 = time.perf_counter()
        quantize(z, proj, cfg.metric)
        search = min(search, time.perf_counter() - t0)
    return step, min(1.0, search / step)


def cmd_bench_quantize(exp, out, log=None):
    ex = exp.experiment
    rows = bench_quantize(ex["bench_sizes"], ex["bench_tokens"], ex["bench_dim"],
                          ex["bench_threads"], ex["bench_repeats"], exp.train.seed)
    for r in rows:
        step, share = quantize_share(exp, r["N"], ex["bench_batch"], ex["bench_repeats"], exp.train.seed)
        r["forward_seconds"] = step
        r["quantize_share"] = share
    with open(os.path.join(out, "bench_quantize.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["variant", "N", "D'", "tokens", "wall_ns", "tokens_per_sec",
                    "forward_seconds", "quantize_share"])
        for r in rows:
            w.writerow(["LC", r["N"], r["dim"], r["tokens"], r["wall_ns"], metrics.fmt(r["tokens_per_sec"]),
                        metrics.fmt(r["forward_seconds"]), metrics.fmt(r["quantize_share"])])
    return rows


COMMANDS = {
    "train": cmd_train,
    "sweep-codebook": cmd_sweep_codebook,
    "ablate-init": cmd_ablate_init,
    "transfer": cmd_transfer,
    "token-replace": cmd_token_replace,
    "ablate-projector": cmd_ablate_projector,
    "ablate-dim": cmd_ablate_dim,
    "bench-quantize": cmd_bench_quantize,
}
