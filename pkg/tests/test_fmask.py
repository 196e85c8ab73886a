import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radap.fmask import (FMaskConfig, MaskError, draw_rectangles, load_predefined_mask, low_pass_filter,
                         make_mask, read_mask, sample_fmask, sample_rmask, sample_spectrum,
                         spectrum_to_gray, threshold_mask, write_mask)
from radap.segmenter import sobel_gradient_magnitude


def test_spectrum_shape_and_determinism():
    cfg = FMaskConfig(4, 4, seed=3)
    z1, z2 = sample_spectrum(cfg), sample_spectrum(cfg)
    assert z1.shape == (4, 4) and np.iscomplexobj(z1)
    np.testing.assert_array_equal(z1, z2)


def test_spectrum_real_parts_are_standard_normal():
    z = sample_spectrum(FMaskConfig(256, 256, seed=1))
    assert abs(z.real.mean()) < 0.01 and abs(z.imag.mean()) < 0.01
    assert abs(z.real.std() - 1) < 0.01


@pytest.mark.parametrize("kwargs", [dict(height=0), dict(width=-2), dict(decay_power=0),
                                    dict(area_range=(0.5, 0.3)), dict(area_range=(0.0, 1.5))])
def test_invalid_config(kwargs):
    with pytest.raises(MaskError):
        FMaskConfig(**kwargs)


def test_low_pass_identity_at_zero_decay():
    z = sample_spectrum(FMaskConfig(8, 8, seed=0))
    np.testing.assert_array_equal(low_pass_filter(z, 0.0), z)


def test_low_pass_nyquist_bin():
    # fftfreq(8) = [0, .125, .25, .375, -.5, -.375, -.25, -.125]; bin (4, 4) is (-.5, -.5)
    out = low_pass_filter(np.ones((8, 8), dtype=complex), 1.0)
    assert out[4, 4] == pytest.approx(1 / (0.5 * math.sqrt(2)))


def test_low_pass_dc_bin_is_clamped():
    out = low_pass_filter(np.ones((8, 8), dtype=complex), 1.0)
    assert out[0, 0] == pytest.approx(8.0)  # 1 / (1/8)


def test_low_pass_monotone_in_decay():
    z = sample_spectrum(FMaskConfig(16, 16, seed=2))
    a, b = np.abs(low_pass_filter(z, 1.0)), np.abs(low_pass_filter(z, 3.0))
    # every radial frequency on a 16 grid is < 1, so a larger decay amplifies
    assert (b > a).all()


def test_gray_round_trip():
    rng = np.random.default_rng(0)
    image = rng.random((12, 10))
    expected = (image - image.min()) / (image.max() - image.min())
    gray = spectrum_to_gray(np.fft.fft2(image))
    assert np.abs(gray - expected).max() < 1e-6


def test_gray_is_normalised():
    gray = spectrum_to_gray(low_pass_filter(sample_spectrum(FMaskConfig(16, 16, seed=4)), 3))
    assert gray.min() == 0 and gray.max() == 1


def test_gray_degenerate_zero_spectrum():
    np.testing.assert_array_equal(spectrum_to_gray(np.zeros((5, 5), dtype=complex)), np.zeros((5, 5)))


def test_threshold_zero_area():
    assert threshold_mask(np.random.default_rng(0).random((4, 4)), 0.0).sum() == 0


def test_threshold_half_area_4x4():
    g = np.arange(16, dtype=float).reshape(4, 4) / 15
    m = threshold_mask(g, 0.5)
    # k = 8: the 8th largest value is 8/15; values 9..15 exceed it
    assert m.sum() == 7
    np.testing.assert_array_equal(m.ravel(), (np.arange(16) > 8).astype(np.uint8))


def test_threshold_constant_field():
    assert threshold_mask(np.full((4, 4), 0.3), 0.7).sum() == 0


@pytest.mark.parametrize("frac", [-0.1, 1.01])
def test_threshold_rejects_fraction(frac):
    with pytest.raises(MaskError):
        threshold_mask(np.zeros((2, 2)), frac)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_area_law_matches_sort_oracle(h, w, frac, seed):
    field = np.random.default_rng(seed).permutation(h * w).reshape(h, w).astype(float)
    k = math.floor(frac * h * w + 0.5)
    order = np.argsort(-field, axis=None)
    expected = np.zeros(h * w, dtype=np.uint8)
    expected[order[:max(k - 1, 0)]] = 1
    np.testing.assert_array_equal(threshold_mask(field, frac).ravel(), expected)


def test_fmask_area_bounds_for_fpatch_range():
    cfg = FMaskConfig(32, 32, 3.0, (0.02, 0.3))
    rng = np.random.default_rng(0)
    hw = 32 * 32
    for _ in range(300):
        frac = sample_fmask(cfg, rng).sum() / hw
        assert 0.02 - 2 / hw <= frac <= 0.30


def test_fmask_deterministic():
    cfg = FMaskConfig(32, 32, seed=11)
    np.testing.assert_array_equal(sample_fmask(cfg), sample_fmask(cfg))


def test_fmask_mean_area_full_range():
    cfg = FMaskConfig(32, 32, 3.0, (0.0, 1.0))
    rng = np.random.default_rng(5)
    mean = np.mean([sample_fmask(cfg, rng).mean() for _ in range(1000)])
    assert abs(mean - 0.5) < 0.02


def test_larger_decay_gives_smoother_masks():
    rng = np.random.default_rng(9)
    smooth, rough = [], []
    for _ in range(50):
        z = sample_spectrum(FMaskConfig(32, 32), rng)
        for decay, out in ((3.0, smooth), (1.0, rough)):
            m = threshold_mask(spectrum_to_gray(low_pass_filter(z, decay)), 0.3)
            out.append(sobel_gradient_magnitude(m).mean())
    assert np.mean(smooth) < np.mean(rough)


def test_rmask_single_rectangle_area():
    m = sample_rmask(8, 8, 1, (3, 3), np.random.default_rng(0))
    assert m.sum() == 9


def test_rmask_zero_rectangles():
    assert sample_rmask(8, 8, 0, (2, 3), 0).sum() == 0


def test_disjoint_rectangles():
    assert draw_rectangles(8, 8, [(0, 0, 2, 2), (5, 5, 2, 2)]).sum() == 8


def test_rmask_default_count_and_sizes():
    rng = np.random.default_rng(1)
    for _ in range(50):
        m = sample_rmask(32, 32, rng=rng)
        assert 3 * 3 <= m.sum() <= 3 * 13 * 13


@pytest.mark.parametrize("size_range", [(9, 9), (3, 2), (0, 2)])
def test_rmask_impossible_placement(size_range):
    with pytest.raises(MaskError):
        sample_rmask(8, 8, 1, size_range, 0)


@pytest.mark.parametrize("name", ["glasses", "sticker", "respirator"])
def test_predefined_masks(name):
    m = load_predefined_mask(name, 112, 112)
    assert m.shape == (112, 112) and m.dtype == np.uint8
    assert 0 < m.sum() < m.size
    np.testing.assert_array_equal(m, load_predefined_mask(name, 112, 112))


def test_sticker_inside_image():
    m = load_predefined_mask("sticker", 112, 112)
    rows, cols = np.nonzero(m)
    assert rows.min() > 0 and cols.min() > 0 and rows.max() < 111 and cols.max() < 111


def test_unknown_predefined_mask():
    with pytest.raises(MaskError):
        load_predefined_mask("hat")


def test_make_mask_dispatch():
    assert make_mask("fmask", 16, 16, 0, area_range=(0.2, 0.3)).shape == (16, 16)
    assert make_mask("rmask", 16, 16, 0, rect_count=1).sum() > 0
    assert make_mask("glasses", 16, 16).sum() > 0


def test_mask_file_round_trip(tmp_path):
    m = sample_fmask(FMaskConfig(16, 16, seed=2))
    write_mask(tmp_path / "m.png", m)
    np.testing.assert_array_equal(read_mask(tmp_path / "m.png"), m)


def test_mask_file_rejects_grey_levels(tmp_path):
    from PIL import Image
    Image.fromarray(np.full((4, 4), 128, dtype=np.uint8)).save(tmp_path / "bad.png")
    with pytest.raises(MaskError):
        read_mask(tmp_path / "bad.png")


def test_mask_file_rejects_rgb(tmp_path):
    from PIL import Image
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(tmp_path / "rgb.png")
    with pytest.raises(MaskError):
        read_mask(tmp_path / "rgb.png")
