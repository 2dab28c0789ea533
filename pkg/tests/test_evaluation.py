import math

import numpy as np
import pytest
import torch

from conftest import tiny_config
from detco.config import EvalConfig
from detco.evaluation import (
    ABLATION_ROWS,
    AblationRow,
    ProbeReport,
    extract_features,
    format_table,
    index_split,
    linear_probe,
    probe,
    rows_to_json,
    split_mask,
)
from detco.model import DetcoEncoder, parameter_set
from detco.trainer import init_state


@pytest.fixture(scope="module")
def encoder():
    return init_state(tiny_config()).query


def test_separable_two_class():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 5))
    y = (x[:, 0] > 0).astype(int)
    x[:, 0] += np.where(y == 1, 1.0, -1.0)
    for kind in ("linear-softmax", "linear-svm"):
        assert linear_probe(x, y, EvalConfig(probe_type=kind)) == 1.0


def test_shuffled_labels_stay_near_chance():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(600, 10))
    y = rng.permutation(np.repeat(np.arange(4), 150))
    cfg = EvalConfig(epochs=100)
    mask = index_split(y, cfg.train_fraction, 0)
    acc = linear_probe(x, y, cfg, train_mask=mask)
    n_val = int((~mask).sum())
    assert abs(acc - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / n_val)


def test_duplicating_rows_leaves_accuracy_unchanged():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(120, 6))
    y = (x[:, :2].sum(axis=1) > 0).astype(int)
    cfg = EvalConfig(epochs=150)
    once = linear_probe(x, y, cfg)
    twice = linear_probe(np.concatenate([x, x]), np.concatenate([y, y]), cfg)
    assert once == twice


def test_split_mask_is_content_based():
    x = np.random.default_rng(3).normal(size=(50, 4))
    m = split_mask(x, 0.7, 0)
    assert np.array_equal(split_mask(x[::-1], 0.7, 0), m[::-1])
    assert 0 < m.sum() < 50


def test_index_split_is_stratified():
    y = np.repeat(np.arange(3), 10)
    m = index_split(y, 0.7, 5)
    assert [int(m[y == c].sum()) for c in range(3)] == [7, 7, 7]
    assert np.array_equal(m, index_split(y, 0.7, 5))


def test_probe_input_errors():
    with pytest.raises(ValueError, match="at least"):
        linear_probe(np.zeros((3, 2)), np.array([0, 1, 1]))
    with pytest.raises(ValueError, match="degenerate"):
        linear_probe(np.zeros((6, 2)), np.array([0, 1] * 3), train_mask=np.ones(6, bool))


def test_feature_shape_and_determinism(encoder, small_toy):
    a = extract_features(encoder, small_toy.images, 5, side=64)
    b = extract_features(encoder, small_toy.images, 5, side=64)
    assert a.shape == (len(small_toy), 64)
    assert np.array_equal(a, b)
    assert extract_features(encoder, small_toy.images, 2, side=64).shape == (len(small_toy), 8)


def test_extraction_does_not_touch_encoder(encoder, small_toy):
    encoder.train()
    before = {k: v.clone() for k, v in parameter_set(encoder).items()}
    extract_features(encoder, small_toy.images, 3, side=64)
    assert encoder.training
    assert all(torch.equal(before[k], v) for k, v in parameter_set(encoder).items())


def test_stage_out_of_range(encoder, small_toy):
    with pytest.raises(ValueError, match="stage"):
        extract_features(encoder, small_toy.images, 1)


def test_probe_report(encoder, small_toy):
    cfg = EvalConfig(epochs=20, stages=(2, 5))
    report = probe(encoder, small_toy.images, small_toy.labels, cfg, side=64)
    assert set(report.accuracy) == {2, 5}
    assert all(0 <= a <= 1 for a in report.accuracy.values())
    assert report.chance == 0.25
    again = probe(encoder, small_toy.images, small_toy.labels, cfg, side=64)
    assert again.accuracy == report.accuracy


def test_ablation_table_structure():
    rows = [
        AblationRow(n, mls, glc, ProbeReport({s: 0.5 for s in (2, 3, 4, 5)}, 0.125, {}), 1.0, "x")
        for n, mls, glc in ABLATION_ROWS
    ]
    table = format_table(rows).splitlines()
    assert len(table) == 5
    assert table[1].split()[:3] == ["(a)", "no", "no"]
    assert table[4].split()[:3] == ["(d)", "yes", "yes"]
    js = rows_to_json(rows)
    assert [r["row"] for r in js] == ["a", "b", "c", "d"]
    assert all(len(r["accuracy"]) == 4 for r in js)
