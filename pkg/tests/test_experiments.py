import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from vqlab import experiments as X
from vqlab.cli import main
from vqlab.model import ConfigError


def small(**over):
    cfg = {
        "data": {"count": 48, "size": 16, "seed": 0},
        "model": {"image_size": 16, "codebook_size": 32, "enc_hidden": [16], "dec_hidden": [16],
                  "feature_dim": 8, "proj_dim": 4},
        "train": {"epochs": 1, "warmup_epochs": 0, "batch_size": 16},
        "codebook": {"sample_rows": 2000, "max_iters": 5},
        "experiment": {"sizes": [8, 16], "dims": [4, 2], "M": [1, 2, 4], "bench_sizes": [100, 1000],
                       "bench_tokens": 500, "bench_repeats": 1, "bench_batch": 2, "samples": 1},
    }
    for k, v in over.items():
        cfg.setdefault(k, {}).update(v)
    return cfg


def write_cfg(tmp_path, cfg):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def test_load_config_defaults_and_echo():
    exp = X.load_config({})
    assert exp.model.variant == "LC" and exp.train.epochs == 20 and exp.data["count"] == 5000
    assert json.loads(json.dumps(exp.to_dict()))["model"]["beta"] == 0.33


@pytest.mark.parametrize("bad,field", [
    ({"model": {"variant": "XX"}}, "model.variant"),
    ({"model": {"nope": 1}}, "model.nope"),
    ({"train": {"warmup_epochs": 50}}, "train.warmup_epochs"),
    ({"data": {"style": "plaid"}}, "data.style"),
    ({"data": {"size": 30}, "model": {"image_size": 30}}, "model.image_size"),
    ({"experiment": {"sizes": [4, 2]}}, "experiment.sizes"),
    ({"codebook": {"init": "magic"}}, "codebook.init"),
    ({"bogus": {}}, "bogus"),
])
def test_config_errors_name_field(bad, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        X.load_config(bad)


def test_seed_override():
    exp = X.load_config({"data": {"seed": 5}}, seed=9)
    assert exp.model.seed == exp.train.seed == exp.codebook["seed"] == 9
    assert exp.data["seed"] == 5


def test_cli_train_artifacts(tmp_path):
    out = tmp_path / "run"
    cfg = small(data={"count": 64})
    assert main(["train", "--config", write_cfg(tmp_path, cfg), "--out", str(out), "--quiet"]) == 0
    for name in ("run.csv", "run.json", "model.vqmd", "code_activity.csv", "config.json"):
        assert (out / name).exists(), name
    with open(out / "run.csv") as f:
        assert len(list(csv.DictReader(f))) == 1
    counts = np.loadtxt(out / "code_activity.csv", delimiter=",", skiprows=1)[:, 1]
    assert counts.sum() == 58 * 16  # train images * tokens per image


def test_cli_refuses_overwrite_and_exit_codes(tmp_path):
    cfg = write_cfg(tmp_path, small())
    out = tmp_path / "o"
    out.mkdir()
    (out / "keep").write_text("x")
    assert main(["train", "--config", cfg, "--out", str(out), "--quiet"]) == 2
    assert (out / "keep").exists()
    assert main(["train", "--config", cfg, "--out", str(out), "--quiet", "--force"]) == 0
    assert not (out / "keep").exists() and (out / "run.csv").exists()
    bad = write_cfg(tmp_path, {"model": {"variant": "nope"}})
    assert main(["train", "--config", bad, "--out", str(tmp_path / "x"), "--quiet"]) == 2
    assert not (tmp_path / "x").exists()
    missing = small(codebook={"source": "file", "feature_file": str(tmp_path / "absent.vqtf")})
    assert main(["train", "--config", write_cfg(tmp_path, missing), "--out", str(tmp_path / "y"),
                 "--quiet"]) == 1
    assert not (tmp_path / "y").exists()
    assert not [p for p in os.listdir(tmp_path) if ".tmp-" in p]


def test_summary_studies(tmp_path):
    exp = X.load_config(small())
    header = list(X.SUMMARY_FIELDS)
    for name in ("sweep-codebook", "ablate-init", "ablate-projector", "ablate-dim"):
        out = tmp_path / name
        out.mkdir()
        rows = X.COMMANDS[name](exp, str(out))
        with open(out / "summary.csv") as f:
            r = list(csv.reader(f))
        assert r[0] == header
        assert len(r) - 1 == len(rows)
        for row in rows:
            assert 0 <= row["utilization"] <= 1
    dims = [r["D'"] for r in X.read_summary(tmp_path / "ablate-dim" / "summary.csv")]
    assert dims == sorted(dims) == [2, 4]
    sizes = [r["N"] for r in X.read_summary(tmp_path / "sweep-codebook" / "summary.csv")]
    assert sizes == [8, 16]


def test_transfer(tmp_path):
    cfg = small(source_data={"count": 48, "size": 16, "seed": 3, "style": "stripes"})
    exp = X.load_config(cfg)
    rows = X.cmd_transfer(exp, str(tmp_path))
    assert [r["setting"] for r in rows] == ["same-dataset", "cross-dataset"]
    with pytest.raises(ConfigError):
        X.cmd_transfer(X.load_config(small()), str(tmp_path))


def test_token_replace(tmp_path):
    exp = X.load_config(small())
    rows, base = X.cmd_token_replace(exp, str(tmp_path))
    assert [r["M"] for r in rows] == [1, 2, 4]
    assert rows[0]["psnr"] == base.psnr
    with open(tmp_path / "token_replace.csv") as f:
        assert len(list(csv.reader(f))) == 4
    assert (tmp_path / "sample0_M2.ppm").exists()
    model, _ = X.run(exp)
    _, eval_ds = X.make_dataset(exp.data, exp.train.eval_fraction)
    with pytest.raises(ValueError):
        X.token_replace(model, eval_ds, [33])


def test_token_replace_from_checkpoint(tmp_path):
    cfg = write_cfg(tmp_path, small())
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "t"), "--quiet"]) == 0
    c2 = small(experiment={"checkpoint": str(tmp_path / "t" / "model.vqmd")})
    assert main(["token-replace", "--config", write_cfg(tmp_path, c2), "--out", str(tmp_path / "r"),
                 "--quiet"]) == 0
    assert (tmp_path / "r" / "token_replace.csv").exists()


def test_bench(tmp_path):
    exp = X.load_config(small())
    rows = X.cmd_bench_quantize(exp, str(tmp_path))
    assert [r["N"] for r in rows] == [100, 1000]
    assert all(0 < r["quantize_share"] <= 1 for r in rows)
    with open(tmp_path / "bench_quantize.csv") as f:
        assert next(csv.reader(f)) == ["variant", "N", "D'", "tokens", "wall_ns", "tokens_per_sec",
                                       "forward_seconds", "quantize_share"]


def test_tiny_encoder_source(tmp_path):
    exp = X.load_config(small(codebook={"source": "tiny-encoder"}))
    model, rec = X.run(exp)
    assert model.codebook.dim == exp.model.feature_dim


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "vqlab", "train", "--config", write_cfg(tmp_path, small()),
                        "--out", str(tmp_path / "m"), "--quiet"], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
