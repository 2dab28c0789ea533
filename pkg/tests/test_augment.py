import dataclasses

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from detco.augment import (
    RANDAUG_OPS,
    apply_randaug_op,
    global_view,
    ingest,
    jigsaw_layout,
    jigsaw_views,
    make_bundle,
    resize_bilinear,
    sample_crop,
)
from detco.config import AugmentConfig, desk_config

DESK = desk_config().augment
STILL = dataclasses.replace(
    AugmentConfig(),
    global_crop_scale=(1.0, 1.0),
    flip_prob=0.0,
    jitter_prob=0.0,
    grayscale_prob=0.0,
    blur_prob=0.0,
    randaug_ops=0,
)


def image(h=256, w=256, seed=0):
    return np.random.default_rng(seed).random((h, w, 3))


def torch_resize(img, h, w):
    """Reference bilinear resize (half-pixel centers, no antialias)."""
    x = torch.from_numpy(img).permute(2, 0, 1)[None]
    y = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False, antialias=False)
    return y[0].permute(1, 2, 0).numpy()


@pytest.mark.parametrize("shape", [(256, 256, 224, 224), (100, 80, 64, 64), (64, 64, 255, 255), (90, 120, 37, 51)])
def test_resize_matches_reference(shape):
    h, w, oh, ow = shape
    img = image(h, w)
    np.testing.assert_allclose(resize_bilinear(img, oh, ow), torch_resize(img, oh, ow), atol=1e-12)


def test_global_view_shape_and_range():
    v = global_view(image(), seed=5)
    assert v.shape == (224, 224, 3)
    assert v.min() >= 0 and v.max() <= 1


def test_global_view_deterministic():
    img = image()
    assert np.array_equal(global_view(img, 11), global_view(img, 11))


def test_still_global_view_is_plain_resize():
    for h, w in [(256, 256), (300, 200)]:
        img = image(h, w, seed=2)
        np.testing.assert_allclose(global_view(img, 3, STILL), torch_resize(img, 224, 224), atol=1e-12)


def test_jigsaw_shapes_and_permutation():
    ps = jigsaw_views(image(300, 300), seed=4)
    assert ps.patches.shape == (9, 64, 64, 3)
    assert sorted(ps.permutation.tolist()) == list(range(9))
    assert all(cell[2] == 85 for cell in ps.grid_cells)


def _find_identity_seed(cfg):
    for seed in range(5_000_000):
        _, _, perm, _, _ = jigsaw_layout(300, 300, np.random.default_rng(seed), cfg)
        if np.array_equal(perm, np.arange(9)):
            return seed
    raise AssertionError("no identity seed found")


def test_identity_permutation_cells():
    seed = _find_identity_seed(AugmentConfig())
    ps = jigsaw_views(image(300, 300), seed)
    assert ps.permutation.tolist() == list(range(9))
    for j, (r, c, s) in enumerate(ps.crop_boxes):
        row, col = divmod(j, 3)
        assert 85 * row <= r and r + s <= 85 * (row + 1)
        assert 85 * col <= c and c + s <= 85 * (col + 1)


def test_patch_content_comes_from_its_cell():
    cfg = dataclasses.replace(STILL, crop_area_min=1.0)
    img = image(255, 255, seed=8)
    ps = jigsaw_views(img, 0, cfg)
    assert ps.source_crop == (0, 0, 255, 255)
    for j, (r, c, s) in enumerate(ps.crop_boxes):
        np.testing.assert_array_equal(ps.patches[j], img[r : r + s, c : c + s])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**63 - 1), h=st.integers(64, 200), w=st.integers(64, 200))
def test_jigsaw_invariants(seed, h, w):
    ps = jigsaw_views(image(h, w, seed=1), seed, DESK)
    assert ps.patches.shape == (9, DESK.patch_side, DESK.patch_side, 3)
    assert sorted(ps.permutation.tolist()) == list(range(9))
    top, left, ch, cw = ps.source_crop
    assert ch * cw >= 0.6 * h * w
    assert 0 <= top and top + ch <= h and 0 <= left and left + cw <= w
    for j, (r, c, s) in enumerate(ps.crop_boxes):
        r0, c0, cell = ps.grid_cells[ps.permutation[j]]
        assert r0 <= r and r + s <= r0 + cell and c0 <= c and c + s <= c0 + cell
    assert ps.patches.min() >= 0 and ps.patches.max() <= 1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**63 - 1))
def test_global_view_invariants(seed):
    v = global_view(image(96, 96, seed=2), seed, DESK)
    assert v.shape == (64, 64, 3)
    assert v.min() >= 0 and v.max() <= 1


def test_bundle_determinism_and_seed_sensitivity():
    img = image(96, 96)
    a, b = make_bundle(img, 7, DESK), make_bundle(img, 7, DESK)
    for name in ("i_q", "i_k"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    for name in ("p_q", "p_k"):
        assert np.array_equal(getattr(a, name).patches, getattr(b, name).patches)
        assert np.array_equal(getattr(a, name).permutation, getattr(b, name).permutation)
    c = make_bundle(img, 8, DESK)
    assert not np.array_equal(a.i_q, c.i_q)
    assert len(set(a.sub_seeds)) == 4


def test_constant_image_bundle():
    gray = np.full((80, 80, 3), 0.37)
    still = dataclasses.replace(DESK, jitter_prob=0.0, randaug_ops=0)
    b = make_bundle(gray, 1, still)
    for v in (b.i_q, b.i_k, b.p_q.patches, b.p_k.patches):
        np.testing.assert_allclose(v, 0.37, atol=1e-12)
    # with jitter on, views stay uniform per image (no spatial structure is introduced)
    jittered = make_bundle(gray, 2, dataclasses.replace(DESK, jitter_prob=1.0, randaug_ops=0, grayscale_prob=0.0))
    for v in (jittered.i_q, jittered.i_k):
        assert np.ptp(v.reshape(-1, 3), axis=0).max() < 1e-9


def test_small_images_are_upscaled():
    out = ingest(np.random.default_rng(0).random((20, 40, 3)))
    assert out.shape == (64, 128, 3)
    assert ingest(np.zeros((10, 10), dtype=np.uint8)).shape == (64, 64, 3)


@pytest.mark.parametrize("op", RANDAUG_OPS)
def test_randaug_ops_preserve_shape_and_range(op):
    img = image(64, 64, seed=3)
    out = np.clip(apply_randaug_op(img, op, 9 / 30, -1.0), 0, 1)
    assert out.shape == img.shape
    assert np.isfinite(out).all()


def test_crop_area_bound_holds_over_many_draws():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        h, w = rng.integers(64, 400, size=2)
        top, left, ch, cw = sample_crop(int(h), int(w), rng, (0.6, 1.0), (3 / 4, 4 / 3))
        assert ch * cw >= 0.6 * h * w
