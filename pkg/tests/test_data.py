import hashlib
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from padistill import data as D
from padistill import nets
from padistill.tensorio import FormatError

from oracles import nearest_centroid_accuracy

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
TRAIN_IMAGES = os.path.join(FIXTURES, "digits-train-images-idx3-ubyte")
# sha256 of the first fixture image's raw u8 bytes, frozen when the fixture was written
FIRST_IMAGE_SHA256 = "e9b8ed7f45c052afa19be55cd65d081d8895023c3131024642a3e41e2db7a9bc"


def test_blobs_deterministic_and_spread_zero():
    a = D.gen_blobs(3, 5, (1, 2, 2), 1.0, seed=4)
    b = D.gen_blobs(3, 5, (1, 2, 2), 1.0, seed=4)
    np.testing.assert_array_equal(a.images, b.images)
    z = D.gen_blobs(3, 5, (1, 2, 2), 0.0, seed=4)
    for c in range(3):
        imgs = z.images[z.labels == c]
        assert np.all(imgs == imgs[0])


def test_blobs_nearest_centroid_floor():
    tr = D.gen_blobs(10, 200, (1, 8, 8), 0.5, seed=0)
    te = D.gen_blobs(10, 100, (1, 8, 8), 0.5, seed=0, split="test")
    assert nearest_centroid_accuracy(tr.images, tr.labels, te.images, te.labels, 10) >= 0.9


def test_blobs_rejects_single_class():
    with pytest.raises(ValueError):
        D.gen_blobs(1, 5)


def test_dataset_invariants():
    with pytest.raises(ValueError, match="non-finite"):
        D.LabeledDataset(np.full((2, 1, 1, 1), np.nan), np.array([0, 1]), 2)
    with pytest.raises(ValueError, match="every class"):
        D.LabeledDataset(np.zeros((2, 1, 1, 1)), np.array([0, 0]), 2)


def test_idx_round_trip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (3, 4, 5), dtype=np.uint8)
    ip, lp = tmp_path / "x-images-idx3-ubyte", tmp_path / "x-labels-idx1-ubyte"
    D.write_idx(imgs, [0, 1, 1], ip, lp)
    ds = D.load_idx_images(ip)
    np.testing.assert_array_equal(np.rint(ds.images[:, 0] * 255).astype(np.uint8), imgs)
    assert ds.labels.tolist() == [0, 1, 1]


def test_idx_errors(tmp_path):
    imgs = np.zeros((3, 2, 2), dtype=np.uint8)
    ip, lp = tmp_path / "images-idx3", tmp_path / "labels-idx1"
    D.write_idx(imgs, [0, 1, 0], ip, lp)
    raw = ip.read_bytes()
    ip.write_bytes(raw[:-1])
    with pytest.raises(FormatError, match="expected 28 bytes, got 27"):
        D.load_idx_images(ip, lp)
    ip.write_bytes(b"\x00\x00\x08\x01" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        D.load_idx_images(ip, lp)
    D.write_idx(imgs, [0, 1], ip, lp)
    with pytest.raises(FormatError, match="3 images but 2 labels"):
        D.load_idx_images(ip, lp)


def test_fixture_golden_checksum():
    ds = D.load_idx_images(TRAIN_IMAGES)
    first = np.rint(ds.images[0, 0] * 255).astype(np.uint8)
    assert hashlib.sha256(first.tobytes()).hexdigest() == FIRST_IMAGE_SHA256
    assert len(ds) == 1500 and ds.num_classes == 10 and ds.image_shape == (1, 8, 8)


def test_zca_whitens_and_inverts():
    rng = np.random.default_rng(1)
    mix = rng.normal(size=(16, 16))
    imgs = (rng.normal(size=(4000, 16)) @ mix).reshape(-1, 1, 4, 4)
    ds = D.LabeledDataset(imgs, np.arange(4000) % 2, 2)
    white, stats = D.zca_fit_apply(ds, eps=1e-6)
    flat = white.images.reshape(len(ds), -1)
    cov = flat.T @ flat / len(flat)
    assert np.linalg.norm(cov - np.eye(16)) < 1e-3
    np.testing.assert_array_equal(stats.matrix, stats.matrix.T)
    assert np.allclose(stats.apply(stats.mean.reshape(1, 1, 4, 4)), 0.0, atol=1e-12)
    assert np.max(np.abs(stats.unapply(white.images) - imgs)) < 1e-6
    with pytest.raises(ValueError):
        D.zca_fit(imgs, eps=0.0)


def test_project_soft_labels_examples():
    out = D.project_soft_labels(np.array([[-0.2, 0.5, 0.7], [0.2, 0.3, 0.5], [-1, -2, -3]]))
    np.testing.assert_allclose(out[0], [0, 5 / 12, 7 / 12], rtol=1e-15)
    np.testing.assert_array_equal(out[1], [0.2, 0.3, 0.5])
    np.testing.assert_array_equal(out[2], np.full(3, 1 / 3))


@settings(max_examples=50)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 5)),
                  elements=st.floats(-5, 5)))
def test_project_soft_labels_on_simplex(sl):
    out = D.project_soft_labels(sl)
    assert np.all(out >= 0) and np.all(out <= 1)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=1e-12)


def test_init_synthetic_counts_and_labels():
    ds = D.gen_blobs(3, 4, (1, 2, 2), seed=0)
    syn = D.init_synthetic(ds, 1, seed=0)
    assert len(syn) == 3
    assert np.all(syn.soft_labels.sum(axis=1) == 1) and np.all(syn.soft_labels.max(axis=1) == 1)
    assert syn.class_of.tolist() == [0, 1, 2]
    np.testing.assert_array_equal(ds.labels[syn.source_indices], syn.class_of)
    with pytest.raises(ValueError, match="fewer than ipc"):
        D.init_synthetic(ds, 5, seed=0)


def test_expert_soft_init_argmax_matches_class():
    ds = D.gen_blobs(3, 20, (1, 2, 2), spread=0.05, seed=0, separation=6.0)
    spec = nets.make_spec("tiny-mlp", (1, 2, 2), 3)
    from padistill.training import sgd_train
    theta = sgd_train(spec, nets.init_params(spec, 0).values, ds.images, ds.one_hot(), 300,
                      0.5, 60, np.random.default_rng(0))
    assert nets.accuracy(spec, theta, ds.images, ds.labels) == 1.0
    syn = D.init_synthetic(ds, 2, 0, "expert_soft", expert=(spec, theta))
    assert np.all(syn.soft_labels.argmax(axis=1) == syn.class_of)
    with pytest.raises(ValueError, match="expert"):
        D.init_synthetic(ds, 2, 0, "expert_soft")


def test_dataset_and_synthetic_persistence(tmp_path):
    ds = D.gen_blobs(2, 3, (1, 2, 2), seed=1)
    D.save_dataset(ds, tmp_path / "ds")
    back = D.load_dataset(tmp_path / "ds")
    assert back.hash == ds.hash
    syn = D.init_synthetic(ds, 2, 0)
    syn.student_lr = 0.01
    D.save_synthetic(syn, tmp_path / "syn", "[x]\n")
    s2 = D.load_synthetic(tmp_path / "syn")
    assert s2.hash == syn.hash and s2.student_lr == 0.01
    with pytest.raises(FileNotFoundError):
        D.load_dataset(tmp_path / "missing")
