import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drseverity.dataio import FundusImage, VesselMask
from drseverity.preprocess import (AffineParams, AugmentationPolicy, apply_params, augment, auto_crop,
                                   extract_patches, graham_enhance, preprocess_for_classifier, resize,
                                   sample_params, to_tensor)
from oracles import graham_oracle


def _fi(px, iid="x", grade=None):
    return FundusImage(iid, np.asarray(px, np.uint8), grade=grade)


def test_auto_crop_border():
    px = np.zeros((60, 80, 3), np.uint8)
    px[10:50, 10:70] = 150
    out = auto_crop(_fi(px))
    assert out.shape == (40, 60)
    assert (out.pixels == 150).all()


def test_auto_crop_no_border_and_black():
    px = np.full((5, 7, 3), 30, np.uint8)
    assert np.array_equal(auto_crop(_fi(px)).pixels, px)
    with pytest.raises(ValueError, match="no foreground"):
        auto_crop(_fi(np.zeros((4, 4, 3))))


@settings(max_examples=60, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(3))))
def test_auto_crop_idempotent(px):
    if px.max() <= 7:
        px = px.copy()
        px[0, 0, 0] = 200
    once = auto_crop(_fi(px))
    assert np.array_equal(auto_crop(once).pixels, once.pixels)


def test_graham_constant_maps_to_128():
    out = graham_enhance(_fi(np.full((20, 30, 3), 77)))
    assert (out.pixels == 128).all()


def test_graham_ramp_oracle():
    ramp = np.tile(np.linspace(0, 255, 16), (16, 1))
    px = np.repeat(np.rint(ramp)[..., None], 3, axis=2).astype(np.uint8)
    out = graham_enhance(_fi(px), sigma_fraction=2 / 16).pixels.astype(int)
    expected = graham_oracle(px[..., 0], 2.0)
    assert np.abs(out[..., 0] - expected).max() <= 1
    assert np.array_equal(out[..., 0], out[..., 1])


def test_graham_errors_and_noise():
    img = _fi(np.full((10, 10, 3), 50))
    with pytest.raises(ValueError):
        graham_enhance(img, sigma_fraction=0)
    a = graham_enhance(img, noise_std=5.0, seed=3).pixels
    b = graham_enhance(img, noise_std=5.0, seed=3).pixels
    assert np.array_equal(a, b) and not (a == 128).all()


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, (9, 11, 3)))
def test_graham_range(px):
    out = graham_enhance(_fi(px)).pixels
    assert out.dtype == np.uint8 and out.shape == px.shape


def test_resize_identity_and_constant():
    px = np.random.default_rng(0).integers(0, 256, (224, 224, 3)).astype(np.uint8)
    assert np.array_equal(resize(_fi(px)).pixels, px)
    out = resize(_fi(np.full((448, 448, 3), 93)), (224, 224))
    assert out.shape == (224, 224) and (out.pixels == 93).all()


def test_resize_checkerboard_hand_bilinear():
    px = np.zeros((2, 2, 3), np.uint8)
    px[0, 1] = px[1, 0] = 255
    # half-pixel centres: source coords per axis -0.25, 0.25, 0.75, 1.25 clamp to 0, .25, .75, 1
    expected = np.array([[0, 64, 191, 255],
                         [64, 96, 159, 191],
                         [191, 159, 96, 64],
                         [255, 191, 64, 0]])
    out = resize(_fi(px), (4, 4)).pixels
    assert np.array_equal(out[..., 0], expected)


def _pair(h, w, seed=0, iid="p"):
    rng = np.random.default_rng(seed)
    px = rng.integers(0, 256, (h, w, 3)).astype(np.uint8)
    mk = rng.integers(0, 2, (h, w)).astype(np.uint8)
    return FundusImage(iid, px), VesselMask(iid, mk)


def test_patch_count_88_images():
    # counts only: 88 images x 68 patches, small rasters keep memory low
    pairs = [_pair(20, 20, k, f"i{k}") for k in range(88)]
    ps = extract_patches(pairs, per_image=68, seed=0, size=16)
    assert len(ps) == 5984


def test_patch_origins_and_content():
    img, mask = _pair(300, 300)
    ps = extract_patches([(img, mask)], per_image=5, seed=1)
    assert len(ps) == 5 and ps.patches.shape == (5, 256, 256, 3)
    for k, (_, t, l) in enumerate(ps.origins):
        assert 0 <= t <= 44 and 0 <= l <= 44
        assert np.array_equal(ps.patches[k], img.pixels[t:t + 256, l:l + 256])
        assert np.array_equal(ps.mask_patches[k], mask.pixels[t:t + 256, l:l + 256])


def test_patch_determinism_and_errors():
    pairs = [_pair(40, 50, 1, "a"), _pair(45, 40, 2, "b")]
    a = extract_patches(pairs, 4, seed=5, size=32)
    b = extract_patches(pairs, 4, seed=5, size=32)
    assert a.patches.tobytes() == b.patches.tobytes() and a.origins == b.origins
    with pytest.raises(ValueError):
        extract_patches(pairs, 0)


def test_small_image_reflect_padded():
    img, mask = _pair(20, 40)
    ps = extract_patches([(img, mask)], 2, seed=0, size=32)
    assert ps.patches.shape == (2, 32, 32, 3)
    # origin (0, l): first 20 rows come from the image, next rows mirror it
    for k, (_, t, l) in enumerate(ps.origins):
        assert t == 0
        assert np.array_equal(ps.patches[k][:20], img.pixels[:, l:l + 32])
        assert np.array_equal(ps.patches[k][20:], img.pixels[::-1][:12, l:l + 32])


def test_augment_identity():
    img = _fi(np.random.default_rng(1).integers(0, 256, (17, 23, 3)), grade=3)
    out = augment(img, AugmentationPolicy.identity())
    assert np.array_equal(out.pixels, img.pixels) and out.grade == 3


def test_flip_and_rotation_laws():
    px = np.random.default_rng(2).integers(0, 256, (9, 9, 3)).astype(np.uint8)
    img = _fi(px)
    assert np.array_equal(apply_params(img, AffineParams(flip_h=True)).pixels, px[:, ::-1])
    assert np.array_equal(apply_params(img, AffineParams(flip_v=True)).pixels, px[::-1])
    rot = apply_params(img, AffineParams(rotation=90.0)).pixels
    # counter-clockwise quarter turn == transpose then reverse rows
    assert np.array_equal(rot, np.transpose(px, (1, 0, 2))[::-1])


def test_sampling_reproducible():
    pol = AugmentationPolicy(seed=11)
    r1, r2 = pol.rng(), pol.rng()
    assert [sample_params(pol, r1) for _ in range(20)] == [sample_params(pol, r2) for _ in range(20)]
    lit = AugmentationPolicy.literal_shear(seed=0)
    p = sample_params(lit, lit.rng())
    assert 20 <= p.shear <= 200


def test_to_tensor_rescale():
    t = to_tensor(_fi(np.full((2, 3, 3), 255)))
    assert t.shape == (3, 2, 3) and float(t.max()) == pytest.approx(1.0)


def test_classifier_preprocess_shape():
    px = np.zeros((100, 120, 3), np.uint8)
    px[10:90, 20:100] = 120
    out = preprocess_for_classifier(_fi(px), (64, 64))
    assert out.shape == (64, 64)
