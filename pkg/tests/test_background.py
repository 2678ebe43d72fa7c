from __future__ import annotations

import io

import numpy as np
import pytest

import oracles
from cova import imageproc, synthetic
from cova.background import FIRST_FRAME, MOG, BackgroundModel, BackgroundParams


def noisy_frames(n=25, h=9, w=11, seed=0):
    """Static scene with noise, a brightness step and a passing blob, so
    every branch of the update (match, replace, re-rank) is exercised."""
    rng = np.random.default_rng(seed)
    base = rng.integers(60, 120, (h, w))
    frames = []
    for t in range(n):
        f = base + rng.integers(-4, 5, (h, w))
        if t >= 12:
            f[:, : w // 2] += 50
        if 5 <= t < 9:
            f[2:5, t - 3:t] = 250
        frames.append(np.clip(f, 0, 255).astype(np.uint8))
    return frames


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_mog_masks_match_per_pixel_reference(k):
    p = BackgroundParams(k=k, alpha=0.1)
    frames = noisy_frames()
    model = BackgroundModel(MOG, p)
    got = [model.update_and_classify(f) for f in frames]
    blurred = [imageproc.gaussian_blur(f, p.blur_sigma) for f in frames]
    ref = oracles.mog_masks(blurred, k, p.alpha, p.background_weight_threshold, p.match_sigmas,
                            p.initial_variance, p.initial_weight, p.variance_floor)
    for i, (g, r) in enumerate(zip(got, ref)):
        assert np.array_equal(g, r), f"frame {i}"
    assert sum(m.sum() for m in got) > 0


def test_three_component_fast_path_equals_generic_kernel(monkeypatch):
    from cova import background

    frames = noisy_frames(40, 30, 40, seed=5)
    fast = BackgroundModel(MOG)
    fast_masks = [fast.update_and_classify(f) for f in frames]
    monkeypatch.setattr(background, "_mog_update_3", background._mog_update_k)
    slow = BackgroundModel(MOG)
    slow_masks = [slow.update_and_classify(f) for f in frames]
    assert all(np.array_equal(a, b) for a, b in zip(fast_masks, slow_masks))
    assert np.array_equal(fast.weights, slow.weights)
    assert np.array_equal(fast.means, slow.means)
    assert np.array_equal(fast.variances, slow.variances)


def test_first_frame_is_all_background():
    m = BackgroundModel(MOG)
    assert not m.update_and_classify(np.full((5, 5), 100, np.uint8)).any()
    assert m.frames_seen == 1


def test_first_frame_variant_thresholds_blurred_difference():
    ref = np.full((20, 20), 100, np.uint8)
    cur = ref.copy()
    cur[5:15, 5:15] = 200
    m = BackgroundModel(FIRST_FRAME, BackgroundParams(blur_sigma=1.0, diff_threshold=25))
    m.update_and_classify(ref)
    mask = m.update_and_classify(cur)
    expected = imageproc.abs_diff(imageproc.gaussian_blur(cur, 1.0), imageproc.gaussian_blur(ref, 1.0)) > 25
    assert np.array_equal(mask, expected)
    assert mask[10, 10] and not mask[0, 0]


def test_mog_absorbs_lighting_change_but_first_frame_does_not():
    scene = synthetic.lighting_shift(n=80, width=64, height=48, shift_at=10)
    gray = [imageproc.to_gray(f) for f in scene.frames]
    mog, ff = BackgroundModel(MOG), BackgroundModel(FIRST_FRAME)
    for g in gray:
        mm = mog.update_and_classify(g)
        fm = ff.update_and_classify(g)
    assert mm.mean() < 0.01
    assert fm.mean() > 0.4


def test_shape_change_is_rejected():
    m = BackgroundModel(MOG)
    m.update_and_classify(np.zeros((4, 4), np.uint8))
    with pytest.raises(ValueError, match="dimension"):
        m.update_and_classify(np.zeros((5, 4), np.uint8))


def test_params_are_validated():
    with pytest.raises(ValueError):
        BackgroundParams(alpha=0.0)
    with pytest.raises(ValueError):
        BackgroundParams(k=0)


def test_background_image_before_any_frame_raises():
    with pytest.raises(RuntimeError):
        BackgroundModel(MOG).background_image()


@pytest.mark.parametrize("variant", [MOG, FIRST_FRAME])
def test_snapshot_round_trip_continues_identically(variant):
    frames = noisy_frames(20, 12, 14, seed=2)
    a = BackgroundModel(variant)
    for f in frames[:10]:
        a.update_and_classify(f)
    buf = io.BytesIO()
    a.save(buf)
    buf.seek(0)
    b = BackgroundModel.load(buf)
    assert b.frames_seen == a.frames_seen and b.params == a.params
    for f in frames[10:]:
        assert np.array_equal(a.update_and_classify(f), b.update_and_classify(f))
    assert np.array_equal(a.background_image(), b.background_image())


def test_snapshot_rejects_bad_magic():
    with pytest.raises(ValueError, match="magic"):
        BackgroundModel.load(io.BytesIO(b"XXXX" + b"\0" * 40))


def test_empty_model_snapshot_round_trip():
    buf = io.BytesIO()
    BackgroundModel(MOG).save(buf)
    buf.seek(0)
    assert BackgroundModel.load(buf).frames_seen == 0
