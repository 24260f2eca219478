import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqlab.clustering import FeatureSet
from vqlab.codebook import (
    Codebook,
    CodebookFormatError,
    Projector,
    codebook_from_bytes,
    codebook_to_bytes,
    init_kmeans,
    init_random,
    init_random_selection,
    load_codebook,
    project,
    save_codebook,
)
from vqlab.tensor import Tape, Tensor, backward, tsum


def test_random_init_range():
    cb = init_random(256, 8, seed=0)
    assert cb.entries.shape == (256, 8)
    assert np.abs(cb.entries).max() <= 1 / 256
    assert cb.init_strategy == "random-init"


def test_random_selection_rows_come_from_features():
    rows = np.random.default_rng(0).standard_normal((100, 4)).astype(np.float32)
    cb = init_random_selection(FeatureSet(rows, dataset_id="d"), 10, seed=1)
    assert all(any(np.array_equal(e, r) for r in rows) for e in cb.entries)
    assert len({tuple(e) for e in cb.entries}) == 10
    with pytest.raises(ValueError):
        init_random_selection(FeatureSet(rows), 101, 0)


def test_kmeans_init():
    rows = np.random.default_rng(1).standard_normal((500, 3)).astype(np.float32)
    cb = init_kmeans(FeatureSet(rows, dataset_id="x"), 16, seed=0, max_iters=10)
    assert cb.frozen and cb.init_strategy == "kmeans" and cb.source_dataset == "x"
    mb = init_kmeans(FeatureSet(rows), 16, seed=0, minibatch=True, batch=128, steps=20)
    assert mb.entries.shape == (16, 3)


def test_codebook_validation():
    with pytest.raises(ValueError):
        Codebook(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        Codebook(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        Codebook(np.ones((2, 2)), init_strategy="magic")


def test_checksum_tracks_contents():
    cb = init_random(8, 2, 0)
    c = cb.checksum()
    assert c == init_random(8, 2, 0).checksum()
    cb.entries[0, 0] += 1
    assert cb.checksum() != c


def test_roundtrip_bytes(tmp_path):
    cb = Codebook(np.random.default_rng(2).standard_normal((7, 5)), frozen=False,
                  init_strategy="random-selection", source_dataset="blobs-é", seed=2**40)
    path = tmp_path / "c.vqcb"
    save_codebook(cb, path)
    back = load_codebook(path)
    assert back.entries.tobytes() == cb.entries.tobytes()
    assert (back.frozen, back.init_strategy, back.source_dataset, back.seed) == (
        False, "random-selection", "blobs-é", 2**40)


def test_format_errors():
    blob = codebook_to_bytes(init_random(4, 2, 0))
    with pytest.raises(CodebookFormatError):
        codebook_from_bytes(blob[:10])
    with pytest.raises(CodebookFormatError):
        codebook_from_bytes(blob[:-1])
    with pytest.raises(CodebookFormatError):
        codebook_from_bytes(blob + b"\0")
    with pytest.raises(CodebookFormatError):
        codebook_from_bytes(b"XXXX" + blob[4:])
    bad_version = blob[:4] + (9).to_bytes(2, "little") + blob[6:]
    with pytest.raises(CodebookFormatError):
        codebook_from_bytes(bad_version)


def test_header_is_little_endian():
    blob = codebook_to_bytes(init_random(3, 2, 0))
    assert blob[:4] == b"VQCB"
    assert int.from_bytes(blob[8:12], "little") == 3
    assert int.from_bytes(blob[12:16], "little") == 2


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(1, 6), st.integers(0, 2**64 - 1), st.booleans())
def test_roundtrip_property(n, d, seed, frozen):
    rng = np.random.default_rng(seed % 2**32)
    cb = Codebook(rng.standard_normal((n, d)), frozen=frozen, init_strategy="kmeans", seed=seed)
    back = codebook_from_bytes(codebook_to_bytes(cb))
    assert back.entries.tobytes() == cb.entries.tobytes() and back.seed == seed and back.frozen == frozen


def test_project_gradients_reach_projector_only():
    cb = init_random(10, 4, 0)
    proj = Projector.create(4, 2, seed=0)
    with Tape():
        backward(tsum(project(cb, proj)))
    assert proj.weight.grad is not None and np.any(proj.weight.grad)
    np.testing.assert_allclose(proj.bias.grad, [10.0, 10.0])


def test_project_dimension_mismatch():
    with pytest.raises(ValueError):
        project(init_random(4, 3, 0), Projector.create(4, 2, 0))


def test_projector_without_bias():
    p = Projector.create(3, 2, seed=1, bias=False)
    assert p.bias is None and len(p.parameters()) == 1
    out = project(Tensor(np.eye(3, dtype=np.float32)), p)
    np.testing.assert_array_equal(out.data, p.weight.data)
