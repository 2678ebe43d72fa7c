from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from cova import imageproc
from cova.geometry import BoundingBox

small_masks = arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12)))


def test_gray_uses_rounded_luma_weights():
    rgb = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255], [10, 20, 30]]], np.uint8)
    expected = [round(0.299 * 255), round(0.587 * 255), round(0.114 * 255),
                int(np.floor(0.299 * 10 + 0.587 * 20 + 0.114 * 30 + 0.5))]
    assert imageproc.to_gray(rgb)[0].tolist() == expected


def test_gaussian_kernel_normalized_with_three_sigma_radius():
    k = imageproc.gaussian_kernel(2.0)
    assert len(k) == 13
    assert float(k.sum()) == pytest.approx(1.0, abs=1e-6)
    assert np.allclose(k, k[::-1])
    with pytest.raises(ValueError):
        imageproc.gaussian_kernel(0)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
def test_blur_matches_direct_2d_convolution(sigma):
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, (37, 53)).astype(np.uint8)
    got = imageproc.gaussian_blur(img, sigma).astype(int)
    ref = oracles.blur_2d(img, sigma).astype(int)
    # separable float32 vs 2-D float64 can differ at exact .5 ties only
    assert np.abs(got - ref).max() <= 1
    assert (got == ref).mean() > 0.99


@given(st.integers(0, 255), st.integers(1, 20), st.integers(1, 20), st.sampled_from([0.5, 1.0, 2.0]))
def test_blur_of_constant_image_is_identity(v, h, w, sigma):
    img = np.full((h, w), v, np.uint8)
    assert np.array_equal(imageproc.gaussian_blur(img, sigma), img)


@settings(max_examples=30)
@given(arrays(np.uint8, st.tuples(st.integers(4, 20), st.integers(4, 20))))
def test_blur_preserves_mass_within_rounding(core):
    # a zero margin of the kernel radius keeps the borders out of play
    img = np.pad(core, 3)
    out = imageproc.gaussian_blur(img, 1.0)
    assert abs(int(out.sum()) - int(img.sum())) <= img.size
    assert out.min() >= img.min() and out.max() <= img.max()


def test_abs_diff_and_threshold():
    a = np.array([[0, 200]], np.uint8)
    b = np.array([[30, 100]], np.uint8)
    d = imageproc.abs_diff(a, b)
    assert d.tolist() == [[30, 100]]
    assert imageproc.binary_threshold(d, 30).tolist() == [[False, True]]
    with pytest.raises(ValueError):
        imageproc.abs_diff(a, np.zeros((2, 2), np.uint8))


@settings(max_examples=40)
@given(small_masks, st.integers(1, 2), st.integers(1, 2))
def test_dilate_matches_naive_window_max(mask, r, it):
    assert np.array_equal(imageproc.dilate(mask, r, it), oracles.dilate_naive(mask, r, it))


@given(small_masks, st.integers(1, 3))
def test_dilate_is_extensive_and_composes(mask, r):
    once = imageproc.dilate(mask, r, 1)
    assert not (mask & ~once).any()
    assert np.array_equal(imageproc.dilate(once, r, 1), imageproc.dilate(mask, r, 2))


def test_dilate_rejects_zero_radius():
    with pytest.raises(ValueError):
        imageproc.dilate(np.zeros((3, 3), bool), 0)


@settings(max_examples=60)
@given(small_masks)
def test_connected_components_match_flood_fill(mask):
    got = [((int(b.x_min), int(b.y_min), int(b.x_max), int(b.y_max)), a)
           for b, a in imageproc.connected_components(mask)]
    assert got == oracles.components_bfs(mask)


def test_diagonal_pixels_are_one_component():
    m = np.eye(4, dtype=bool)
    comps = imageproc.connected_components(m)
    assert comps == [(BoundingBox(0, 0, 4, 4), 4)]


def test_lone_pixel_box_uses_pixel_edges():
    m = np.zeros((5, 5), bool)
    m[2, 3] = True
    assert imageproc.connected_components(m) == [(BoundingBox(3, 2, 4, 3), 1)]


def test_mse():
    a = np.zeros((2, 2, 3), np.uint8)
    b = np.full((2, 2, 3), 2, np.uint8)
    assert imageproc.mse(a, b) == 4.0
    assert imageproc.mse(a, a) == 0.0
