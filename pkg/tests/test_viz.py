import json

import numpy as np
import pytest
from PIL import Image

from detco.viz import MetricsLogError, attention_map, overlay, overlay_array, plot_metrics, read_metrics


def test_attention_range_and_extremes(rng):
    for _ in range(20):
        m = attention_map(rng.normal(size=(16, 5, 7)))
        assert m.values.shape == (5, 7)
        assert m.values.min() == 0.0 and m.values.max() == 1.0
        assert not m.constant


def test_attention_channel_permutation_invariance(rng):
    for reduction in ("mean-abs", "max"):
        f = rng.normal(size=(32, 6, 6))
        a = attention_map(f, reduction).values
        b = attention_map(f[rng.permutation(32)], reduction).values
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_attention_full_size_shape():
    f = np.random.default_rng(0).random((2048, 14, 14)).astype(np.float32)
    assert attention_map(f).values.shape == (14, 14)


def test_constant_map():
    m = attention_map(np.ones((4, 3, 3)))
    assert m.constant and np.all(m.values == 0)


def test_attention_rejects_bad_shapes():
    with pytest.raises(ValueError):
        attention_map(np.ones((3, 3)))
    with pytest.raises(ValueError, match="reduction"):
        attention_map(np.ones((2, 3, 3)), "median")


def test_overlay_keeps_source_where_attention_is_zero(tmp_path):
    img = np.random.default_rng(1).random((64, 64, 3))
    m = attention_map(np.zeros((4, 2, 2)))
    np.testing.assert_allclose(overlay_array(img, m), img)
    path = overlay(img, attention_map(np.random.default_rng(2).random((4, 2, 2))), tmp_path / "a" / "o.png")
    with Image.open(path) as im:
        assert im.size == (64, 64)


def _log(path, n=5):
    with open(path, "w") as fh:
        for s in range(1, n + 1):
            rec = {"step": s, "total": 10.0 / s, "lr": 0.1, "l_gg": [1.0] * 4, "l_ll": [2.0] * 4, "l_gl": [3.0] * 4}
            fh.write(json.dumps(rec) + "\n")
    return path


def test_plot_metrics_writes_charts_and_csv(tmp_path):
    written = plot_metrics(_log(tmp_path / "m.jsonl"), tmp_path / "plots")
    assert set(written) == {"total", "lr", "l_gg", "l_ll", "l_gl"}
    for name in written:
        assert (tmp_path / "plots" / f"{name}.png").exists()
    rows = (tmp_path / "plots" / "l_gg.csv").read_text().splitlines()
    assert rows[0] == "step,res2,res3,res4,res5"
    assert len(rows) == 6
    total = (tmp_path / "plots" / "total.csv").read_text().splitlines()
    assert float(total[2].split(",")[1]) == 5.0


def test_metrics_errors(tmp_path):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    with pytest.raises(MetricsLogError, match="no records"):
        read_metrics(empty)
    bad = _log(tmp_path / "b.jsonl", 3)
    with open(bad, "a") as fh:
        fh.write("{broken\n")
    with pytest.raises(MetricsLogError, match=":4:"):
        read_metrics(bad)
