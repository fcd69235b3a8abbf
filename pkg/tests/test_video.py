"""Visual front-end: crop geometry, bilinear resize against a reference
implementation, CNN shape chain and gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avalign.errors import InputError, ShapeError
from avalign.tensor import Rng, Tensor, finite_difference_check
from avalign.video import (
    ChannelNorm,
    ResBlock,
    VisualCnn,
    crop_lip_region,
    downsample_to_36,
    preprocess_frames,
)


# -- crop ---------------------------------------------------------------------

def test_crop_keeps_bottom_40_middle_80():
    frame = np.zeros((100, 100, 3), np.uint8)
    out = crop_lip_region(frame)
    assert out.shape == (40, 80, 3)


def test_crop_region_location():
    frame = np.arange(100 * 100 * 3, dtype=np.int64).reshape(100, 100, 3)
    out = crop_lip_region(frame)
    assert np.array_equal(out, frame[60:100, 10:90])


@given(h=st.integers(10, 300), w=st.integers(10, 300))
@settings(max_examples=50, deadline=None)
def test_crop_fractions(h, w):
    out = crop_lip_region(np.zeros((h, w, 3), np.uint8))
    oh, ow = out.shape[:2]
    # height fraction within one pixel of 0.4, width within one of 0.8
    assert abs(oh - 0.4 * h) <= 1.0
    assert abs(ow - 0.8 * w) <= 1.0


def test_crop_rejects_bad_input():
    with pytest.raises(InputError):
        crop_lip_region(np.zeros((100, 100)))
    with pytest.raises(InputError):
        crop_lip_region(np.zeros((3, 3, 3)))


# -- resize -------------------------------------------------------------------

def test_resize_identity_on_36():
    img = Rng(0).uniform(0, 255, (36, 36, 3))
    assert np.allclose(downsample_to_36(img), img, atol=1e-12)


def test_resize_constant_image_stays_constant():
    img = np.full((40, 80, 3), 123.0)
    out = downsample_to_36(img)
    assert out.shape == (36, 36, 3)
    assert np.allclose(out, 123.0, atol=1e-10)


def test_resize_matches_reference_pointwise():
    # scalar reference: one output pixel computed from first principles
    img = Rng(1).uniform(0, 255, (40, 80, 3))
    out = downsample_to_36(img)
    for (r, c) in [(0, 0), (17, 20), (35, 35)]:
        sr = min(max((r + 0.5) * 40 / 36 - 0.5, 0.0), 39.0)
        sc = min(max((c + 0.5) * 80 / 36 - 0.5, 0.0), 79.0)
        r0, c0 = int(np.floor(sr)), int(np.floor(sc))
        r1, c1 = min(r0 + 1, 39), min(c0 + 1, 79)
        fr, fc = sr - r0, sc - c0
        ref = (
            img[r0, c0] * (1 - fr) * (1 - fc)
            + img[r0, c1] * (1 - fr) * fc
            + img[r1, c0] * fr * (1 - fc)
            + img[r1, c1] * fr * fc
        )
        assert np.allclose(out[r, c], ref, atol=1e-10)


def test_resize_preserves_value_range():
    img = Rng(2).uniform(10, 20, (50, 70, 3))
    out = downsample_to_36(img)
    assert out.min() >= 10.0 - 1e-9 and out.max() <= 20.0 + 1e-9


def test_preprocess_frames_shape():
    frames = np.zeros((7, 60, 60, 3), np.uint8)
    assert preprocess_frames(frames).shape == (7, 36, 36, 3)


# -- channel norm --------------------------------------------------------------

def test_channel_norm_standardizes_each_channel_map():
    norm = ChannelNorm(3, np.float64)
    x = Tensor(Rng(3).uniform(-5, 5, (2, 6, 6, 3)))
    y = norm(x).data
    for b in range(2):
        for c in range(3):
            ch = y[b, :, :, c]
            assert abs(ch.mean()) < 1e-10
            assert abs(ch.std() - 1.0) < 1e-3


def test_channel_norm_gradient_fd():
    norm = ChannelNorm(2, np.float64)
    x = Tensor(Rng(4).uniform(-1, 1, (1, 4, 4, 2)), dtype=np.float64)

    def f(t):
        y = norm(t)
        return (y * y).sum()

    assert finite_difference_check(f, x) < 1e-5


# -- residual blocks / full CNN --------------------------------------------------

def test_resblock_identity_shortcut_shape():
    blk = ResBlock(Rng(5), 4, 4, 1, np.float64)
    x = Tensor(Rng(6).uniform(-1, 1, (2, 8, 8, 4)))
    assert blk(x).shape == (2, 8, 8, 4)


def test_resblock_strided_projection_shape():
    blk = ResBlock(Rng(7), 4, 8, 2, np.float64)
    x = Tensor(Rng(8).uniform(-1, 1, (2, 9, 9, 4)))
    assert blk(x).shape == (2, 5, 5, 8)


def test_cnn_shape_chain_published_config():
    cnn = VisualCnn(Rng(9), base_channels=8, out_dim=256)
    frames = Rng(10).uniform(0, 255, (2, 36, 36, 3))
    out, inter = cnn(frames, return_intermediates=True)
    assert inter == [
        (2, 36, 36, 8),
        (2, 36, 36, 8),
        (2, 18, 18, 16),
        (2, 9, 9, 32),
        (2, 5, 5, 64),
        (2, 1, 1, 128),
    ]
    assert out.shape == (2, 256)


def test_cnn_rescale_range():
    assert np.allclose(VisualCnn.rescale(np.array([0.0, 127.5, 255.0])), [-1.0, 0.0, 1.0])


def test_cnn_rejects_wrong_input_shape():
    cnn = VisualCnn(Rng(11), base_channels=2, out_dim=8)
    with pytest.raises(ShapeError):
        cnn(np.zeros((2, 32, 32, 3)))


def test_cnn_distinct_inputs_distinct_embeddings():
    cnn = VisualCnn(Rng(12), base_channels=2, out_dim=16)
    a = np.full((1, 36, 36, 3), 30.0)
    b = np.full((1, 36, 36, 3), 220.0)
    ea, eb = cnn(a).data, cnn(b).data
    assert not np.allclose(ea, eb)


def test_cnn_gradient_fd_spot_check():
    # exhaustive whole-model checks live in the verification module; here a
    # quick spot check that the composed CNN graph differentiates cleanly
    cnn = VisualCnn(Rng(13), base_channels=2, out_dim=4, dtype=np.float64)
    frames = Rng(14).uniform(0, 255, (1, 36, 36, 3))
    w = cnn.blocks[1].w1

    def f(t):
        return (cnn(frames) * 0.1).sum()

    assert finite_difference_check(f, w) < 1e-5
