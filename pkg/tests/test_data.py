"""Synthetic dataset determinism, normalization, and external import."""

import numpy as np
import pytest
from PIL import Image

from duodiff.data import (DataError, DatasetSpec, SyntheticDataset,
                          denormalize, generate, load_image_dir, normalize)


def test_generate_deterministic():
    spec = DatasetSpec(seed=3, count=16)
    a, la = generate(spec, 5)
    b, lb = generate(spec, 5)
    np.testing.assert_array_equal(a, b)
    assert la == lb


def test_pixels_in_range():
    spec = DatasetSpec(count=64, seed=1)
    for i in range(64):
        img, _ = generate(spec, i)
        assert img.min() >= -1.0 and img.max() <= 1.0
        assert img.shape == (3, 16, 16)
        assert img.dtype == np.float32


def test_blobs_kind():
    spec = DatasetSpec(kind="gaussian_blobs", count=8, num_classes=0, seed=2)
    img, label = generate(spec, 0)
    assert label is None
    assert img.min() >= -1.0 and img.max() <= 1.0
    # smooth fields should span a real range, not collapse to a constant
    assert img.max() - img.min() > 0.05


def test_class_histogram_uniform():
    spec = DatasetSpec(count=3000, num_classes=3, seed=7)
    ds = SyntheticDataset(spec)
    counts = np.bincount(ds.labels, minlength=3)
    expect = 1000.0
    sigma = np.sqrt(3000 * (1 / 3) * (2 / 3))
    assert np.abs(counts - expect).max() < 3 * sigma


def test_unknown_kind_rejected():
    with pytest.raises(DataError):
        DatasetSpec(kind="mnist")


def test_index_out_of_range():
    spec = DatasetSpec(count=4)
    with pytest.raises(DataError):
        generate(spec, 4)


def test_normalize_denormalize_roundtrip():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (3, 4, 4)).astype(np.float32)
    np.testing.assert_allclose(denormalize(normalize(x)), x, atol=1e-6)


def test_normalize_endpoints():
    zero = np.zeros((3, 2, 2), dtype=np.float32)
    np.testing.assert_array_equal(normalize(zero), -np.ones_like(zero))
    one = np.ones((3, 2, 2), dtype=np.float32)
    np.testing.assert_array_equal(normalize(one), np.ones_like(one))


def test_dataset_iteration_order_stable():
    spec = DatasetSpec(count=32, seed=9)
    a = SyntheticDataset(spec)
    b = SyntheticDataset(spec)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_batch_gathers_rows():
    ds = SyntheticDataset(DatasetSpec(count=16, seed=0))
    imgs, labels = ds.batch([3, 3, 7])
    np.testing.assert_array_equal(imgs[0], imgs[1])
    np.testing.assert_array_equal(imgs[0], ds.images[3])
    assert labels.tolist() == [ds.labels[3]] * 2 + [ds.labels[7]]


def test_load_image_dir_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    raw = rng.integers(0, 256, (2, 8, 8, 3), dtype=np.uint8)
    for i, arr in enumerate(raw):
        Image.fromarray(arr).save(tmp_path / f"img{i}.png")
    out = load_image_dir(str(tmp_path), 8)
    assert out.shape == (2, 3, 8, 8)
    expect = normalize(raw[0].astype(np.float32).transpose(2, 0, 1) / 255.0)
    np.testing.assert_allclose(out[0], expect, atol=1e-6)


def test_load_image_dir_wrong_size(tmp_path):
    Image.new("RGB", (4, 4)).save(tmp_path / "a.png")
    with pytest.raises(DataError):
        load_image_dir(str(tmp_path), 8)


def test_load_image_dir_empty(tmp_path):
    with pytest.raises(DataError):
        load_image_dir(str(tmp_path), 8)
