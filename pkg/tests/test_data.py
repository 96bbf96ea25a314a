import struct

import numpy as np
import pytest

from dwtmec.data import (
    FormatError,
    LabeledSet,
    PerturbSpec,
    affine_warp,
    batch_triples,
    gaussian_blur,
    gen_synthetic_shift,
    load_idx,
    perturb,
    perturb_batch,
    read_idx,
    rotation_scaling,
    write_idx,
)


def linear_probe(train, test):
    # least-squares one-vs-rest linear classifier
    C = train.n_classes
    X = np.c_[train.inputs, np.ones(len(train))]
    W = np.linalg.lstsq(X, np.eye(C)[train.labels], rcond=None)[0]
    return float(np.mean(np.argmax(np.c_[test.inputs, np.ones(len(test))] @ W, axis=1) == test.labels))


def bench(A=None, seed=0):
    return gen_synthetic_shift(seed, 2000, 3, 8, A, None, noise=0.3, correlation=0.6,
                               class_sep=1.5, mean_dims=2)


def test_no_shift_control():
    src, tgt = bench()
    assert abs(linear_probe(src, src) - linear_probe(src, tgt)) < 0.02
    assert np.allclose(src.inputs.mean(axis=0), tgt.inputs.mean(axis=0), atol=0.05)


def test_synthetic_is_deterministic():
    a, b = bench(seed=3), bench(seed=3)
    assert np.array_equal(a[0].inputs, b[0].inputs) and np.array_equal(a[1].labels, b[1].labels)


def test_shift_breaks_source_only_linear_probe():
    _, clean = bench()
    src, shifted = bench(rotation_scaling(8, 30, (2.0, 0.5)))
    assert linear_probe(src, clean) - linear_probe(src, shifted) >= 0.20


def test_singular_shift_rejected():
    with pytest.raises(ValueError):
        gen_synthetic_shift(0, 10, 2, 3, np.zeros((3, 3)))


def test_correlated_class_covariance():
    src, _ = gen_synthetic_shift(0, 4000, 2, 4, noise=1.0, correlation=0.8, corr_block=2)
    x = src.inputs - src.inputs[src.labels == 0].mean(axis=0)
    c = np.corrcoef(x[src.labels == 0].T)
    assert c[0, 1] == pytest.approx(0.8, abs=0.05) and abs(c[0, 2]) < 0.06


# ----------------------------------------------------------------------- IDX

def test_idx_roundtrip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    labels = np.arange(5, dtype=np.uint8)
    write_idx(tmp_path / "i", imgs)
    write_idx(tmp_path / "l", labels)
    raw = (tmp_path / "i").read_bytes()
    assert raw[:4] == bytes([0, 0, 8, 3])
    assert struct.unpack(">3I", raw[4:16]) == (5, 4, 3)
    assert np.array_equal(read_idx(tmp_path / "i"), imgs)
    data = load_idx(tmp_path / "i", tmp_path / "l")
    assert data.inputs.shape == (5, 1, 4, 3)
    assert np.allclose(data.inputs[..., 0, :, :], imgs / 255.0)


def test_idx_errors(tmp_path):
    (tmp_path / "empty").write_bytes(b"")
    with pytest.raises(FormatError, match="offset"):
        read_idx(tmp_path / "empty")
    (tmp_path / "bad").write_bytes(b"\x01\x02\x08\x01\x00\x00\x00\x01\x00")
    with pytest.raises(FormatError, match="offset"):
        read_idx(tmp_path / "bad")
    write_idx(tmp_path / "trunc", np.zeros((4, 2, 2), dtype=np.uint8))
    (tmp_path / "trunc").write_bytes((tmp_path / "trunc").read_bytes()[:-3])
    with pytest.raises(FormatError, match="offset"):
        read_idx(tmp_path / "trunc")
    write_idx(tmp_path / "i", np.zeros((4, 2, 2), dtype=np.uint8))
    write_idx(tmp_path / "l", np.zeros(3, dtype=np.uint8))
    with pytest.raises(FormatError):
        load_idx(tmp_path / "i", tmp_path / "l")


# ---------------------------------------------------------------- perturbation

def test_zero_spec_is_identity():
    img = np.random.default_rng(1).random((1, 8, 8))
    assert np.array_equal(perturb(img, PerturbSpec.none(), np.random.default_rng(0)), img)


def test_blur_keeps_constant_image():
    assert np.allclose(gaussian_blur(np.full((1, 6, 6), 0.4), 0.1), 0.4, atol=1e-15)
    assert np.allclose(gaussian_blur(np.full((1, 6, 6), 0.4), 1.5), 0.4, atol=1e-15)


def test_translation_moves_delta():
    img = np.zeros((1, 9, 9))
    img[0, 3, 4] = 1.0
    out = affine_warp(img, np.eye(2), (2.0, 0.0))
    assert np.unravel_index(np.argmax(out[0]), (9, 9)) == (5, 4)
    assert out[0, 5, 4] == pytest.approx(1.0)


def test_perturb_preserves_shape_and_range():
    rng = np.random.default_rng(2)
    x = rng.random((4, 1, 10, 10))
    y = perturb_batch(x, PerturbSpec(), rng)
    assert y.shape == x.shape and y.min() >= 0 and y.max() <= 1
    assert not np.array_equal(x, y)


# -------------------------------------------------------------- batch_triples

def small_sets(n=50):
    rng = np.random.default_rng(0)
    return (LabeledSet(rng.normal(size=(n, 3)), rng.integers(0, 2, n)),
            LabeledSet(rng.normal(size=(n + 7, 3)), rng.integers(0, 2, n + 7)))


def test_zero_perturbation_views_coincide():
    s, t = small_sets()
    for tr in batch_triples(s, t, 8, PerturbSpec.none(), seed=0):
        assert np.array_equal(tr.target_v1, tr.target_v2)


def test_triples_are_deterministic():
    s, t = small_sets()
    spec = PerturbSpec(feature_noise=0.1)
    a = list(batch_triples(s, t, 8, spec, seed=4, epoch=2))
    b = list(batch_triples(s, t, 8, spec, seed=4, epoch=2))
    assert all(np.array_equal(x.target_v2, y.target_v2) and np.array_equal(x.source_x, y.source_x)
               for x, y in zip(a, b))
    c = list(batch_triples(s, t, 8, spec, seed=4, epoch=3))
    assert not np.array_equal(a[0].target_index, c[0].target_index)


def test_epoch_covers_target_once():
    s, t = small_sets()
    m = 8
    rows = np.concatenate([tr.target_index for tr in batch_triples(s, t, m, PerturbSpec.none(), seed=1)])
    assert len(rows) == (len(t) // m) * m
    assert len(np.unique(rows)) == len(rows)


def test_views_share_samples_and_source_is_perturbed():
    s, t = small_sets()
    spec = PerturbSpec(feature_noise=0.05)
    tr = next(batch_triples(s, t, 8, spec, seed=0))
    base = t.inputs[tr.target_index]
    assert np.max(np.abs(tr.target_v1 - base)) < 0.5 and not np.array_equal(tr.target_v1, tr.target_v2)
    assert not any(np.array_equal(row, r) for row in tr.source_x for r in s.inputs)


def test_batch_size_errors():
    s, t = small_sets()
    with pytest.raises(ValueError):
        next(batch_triples(s, t, 51, PerturbSpec.none(), seed=0))
    with pytest.raises(ValueError):
        PerturbSpec(blur_sigma=-1)
