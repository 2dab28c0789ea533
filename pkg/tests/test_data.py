import logging

import numpy as np
import pytest
from PIL import Image

from detco.config import EvalConfig
from detco.data import ToySpec, generate_toy, load_image_folder, write_image_folder
from detco.evaluation import linear_probe


def _png(path, color):
    Image.fromarray(np.full((8, 8, 3), color, dtype=np.uint8)).save(path)


def test_folder_layout(tmp_path):
    for name, color in (("dog", 200), ("cat", 20)):
        (tmp_path / name).mkdir()
        for i in range(3):
            _png(tmp_path / name / f"{i}.png", color)
    ds = load_image_folder(tmp_path)
    assert len(ds) == 6 and ds.num_classes == 2
    assert ds.class_names == ["cat", "dog"]
    assert ds.labels.tolist() == [0, 0, 0, 1, 1, 1]
    assert all(im.min() >= 0 and im.max() <= 1 for im in ds.images)
    assert ds.images[0].max() == pytest.approx(20 / 255)


def test_empty_folder(tmp_path):
    (tmp_path / "cat").mkdir()
    with pytest.raises(ValueError, match="no readable images"):
        load_image_folder(tmp_path)


def test_corrupt_file_is_skipped(tmp_path, caplog):
    d = tmp_path / "a"
    d.mkdir()
    for i in range(9):
        _png(d / f"{i}.png", 100)
    (d / "broken.png").write_bytes(b"not an image")
    with caplog.at_level(logging.WARNING):
        ds = load_image_folder(tmp_path)
    assert len(ds) == 9 and len(ds.skipped) == 1
    assert "broken.png" in caplog.text


def test_toy_counts_and_range():
    ds = generate_toy(ToySpec(8, 100, 96, seed=1))
    assert len(ds) == 800
    assert all(im.shape == (96, 96, 3) for im in ds.images)
    assert all(im.min() >= 0 and im.max() <= 1 for im in ds.images)
    assert np.bincount(ds.labels).tolist() == [100] * 8


def test_toy_determinism():
    a = generate_toy(ToySpec(4, 5, 64, seed=9))
    b = generate_toy(ToySpec(4, 5, 64, seed=9))
    assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))
    c = generate_toy(ToySpec(4, 5, 64, seed=10))
    assert not np.array_equal(a.images[0], c.images[0])


def test_spec_validation():
    with pytest.raises(ValueError):
        ToySpec(num_classes=1)
    with pytest.raises(ValueError):
        ToySpec(image_side=32)


def _mean_rgb(ds):
    return np.stack([im.reshape(-1, 3).mean(axis=0) for im in ds.images])


def test_mean_colour_is_not_enough():
    """A bias-free linear classifier on per-image mean RGB stays below 90%."""
    ds = generate_toy(ToySpec(8, 100, 96, seed=1))
    x, y = _mean_rgb(ds), ds.labels
    rng = np.random.default_rng(0)
    train = rng.random(len(y)) < 0.7
    # least-squares one-vs-rest without intercept
    targets = np.eye(8)[y[train]]
    w, *_ = np.linalg.lstsq(x[train], targets, rcond=None)
    acc = float(((x[~train] @ w).argmax(axis=1) == y[~train]).mean())
    assert acc < 0.9


def test_pixels_carry_class_signal():
    ds = generate_toy(ToySpec(8, 60, 64, seed=2))
    small = np.stack([im[::8, ::8].ravel() for im in ds.images])
    acc = linear_probe(small, ds.labels, EvalConfig(epochs=200))
    chance = 1 / 8
    assert acc > chance + 3 * np.sqrt(chance * (1 - chance) / (0.3 * len(ds)))


def test_write_then_load_round_trip(tmp_path):
    ds = generate_toy(ToySpec(2, 3, 64, seed=0))
    write_image_folder(ds, tmp_path)
    back = load_image_folder(tmp_path)
    assert back.class_names == ds.class_names
    assert back.labels.tolist() == ds.labels.tolist()
    np.testing.assert_allclose(back.images[0], ds.images[0], atol=0.5 / 255 + 1e-12)
