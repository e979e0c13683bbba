"""Tests for image metrics, redundancy filtering, and block matching."""

import numpy as np
import pytest

from egomap.errors import DimensionMismatch
from egomap.imaging import (
    HIST_BINS,
    PixelMatchSet,
    block_match,
    filter_redundant,
    histogram_similarity,
    luma,
    psnr,
    read_png,
    ssim,
    write_png,
)


def noise_image(rng, h=64, w=64):
    return rng.integers(0, 256, (h, w, 3), dtype=np.uint8)


def textured_image(rng, h=64, w=64):
    """Smooth blobs plus speckle: enough structure for corners and SSIM."""
    yy, xx = np.mgrid[0:h, 0:w]
    base = (
        120
        + 60 * np.sin(xx / 7.0)
        + 50 * np.cos(yy / 9.0)
        + rng.normal(0, 12, (h, w))
    )
    img = np.stack([base, np.roll(base, 3, axis=1), np.roll(base, 5, axis=0)], axis=2)
    return np.clip(img, 0, 255).astype(np.uint8)


class TestSSIM:
    def test_self_similarity(self):
        rng = np.random.default_rng(0)
        img = textured_image(rng)
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_constant_offset_vs_noise(self):
        # Direct evaluation of the formula: constant images have zero
        # variance, so SSIM reduces to the luminance term.
        rng = np.random.default_rng(1)
        a = np.full((32, 32, 3), 100, dtype=np.uint8)
        b = np.full((32, 32, 3), 150, dtype=np.uint8)
        mu_a, mu_b = luma(a)[0, 0], luma(b)[0, 0]
        c1 = (0.01 * 255) ** 2
        expect = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
        got = ssim(a, b)
        assert got == pytest.approx(expect, abs=1e-12)
        assert got < 1.0
        assert got > ssim(a, noise_image(rng, 32, 32))

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a, b = textured_image(rng), noise_image(rng)
            assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            ssim(np.zeros((16, 16, 3), np.uint8), np.zeros((16, 24, 3), np.uint8))


class TestPSNR:
    def test_identical_capped(self):
        img = np.full((16, 16, 3), 7, dtype=np.uint8)
        assert psnr(img, img) == 100.0

    def test_full_scale_difference(self):
        a = np.zeros((16, 16, 3), np.uint8)
        b = np.full((16, 16, 3), 255, np.uint8)
        assert psnr(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_known_mse(self):
        # MSE of 25 -> 10 log10(255^2 / 25) = 34.1514 dB.
        a = np.full((16, 16, 3), 100, np.uint8)
        b = np.full((16, 16, 3), 105, np.uint8)
        assert psnr(a, b) == pytest.approx(10 * np.log10(255**2 / 25), abs=1e-9)
        assert psnr(a, b) == pytest.approx(34.1514, abs=1e-3)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a, b = noise_image(rng), noise_image(rng)
        assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-12)


class TestHistogramSimilarity:
    def test_identical(self):
        rng = np.random.default_rng(4)
        img = noise_image(rng)
        assert histogram_similarity(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_matches_direct_correlation(self):
        # Oracle: recompute the correlation from raw bin counts.
        rng = np.random.default_rng(5)
        a = noise_image(rng)
        b = a[:, :, [1, 2, 0]]  # channel-permuted copy
        got = histogram_similarity(a, b)
        vals = []
        for c in range(3):
            ha = np.bincount(a[:, :, c].ravel() >> 3, minlength=HIST_BINS).astype(float)
            hb = np.bincount(b[:, :, c].ravel() >> 3, minlength=HIST_BINS).astype(float)
            vals.append(np.corrcoef(ha, hb)[0, 1])
        assert -1.0 <= got <= 1.0
        assert got == pytest.approx(np.mean(vals), abs=1e-9)

    def test_solid_colors_anticorrelate(self):
        # Two-bin analytic case: each channel of the pair occupies two
        # disjoint bins, so every per-channel correlation is -1/31.
        red = np.zeros((16, 16, 3), np.uint8)
        red[:, :, 0] = 255
        cyan = np.full((16, 16, 3), 255, np.uint8)
        cyan[:, :, 0] = 0
        assert histogram_similarity(red, cyan) == pytest.approx(-1 / 31, abs=1e-9)
        assert histogram_similarity(red, cyan) <= 0.0

    def test_solid_red_vs_blue_channelwise(self):
        # Channels where the colors differ anticorrelate; the shared
        # all-zero green channel correlates perfectly, so the average
        # stays positive. Asserted per the implemented formula.
        red = np.zeros((16, 16, 3), np.uint8)
        red[:, :, 0] = 255
        blue = np.zeros((16, 16, 3), np.uint8)
        blue[:, :, 2] = 255
        expect = (-1 / 31 + 1.0 + -1 / 31) / 3
        assert histogram_similarity(red, blue) == pytest.approx(expect, abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            a, b = noise_image(rng), textured_image(rng)
            assert histogram_similarity(a, b) == pytest.approx(
                histogram_similarity(b, a), abs=1e-12
            )


def exhaustive_filter(frames, threshold):
    """Independent oracle: SSIM against the last kept frame, no gate."""
    kept = [0]
    for i in range(1, len(frames)):
        if ssim(frames[kept[-1]], frames[i]) <= threshold:
            kept.append(i)
    return kept


class TestFilterRedundant:
    def test_all_identical(self):
        img = np.full((32, 32, 3), 40, np.uint8)
        assert filter_redundant([img] * 6, 0.95) == [0]

    def test_alternating_distinct(self):
        rng = np.random.default_rng(7)
        a, b = textured_image(rng, 32, 32), noise_image(rng, 32, 32)
        frames = [a, b, a, b, a]
        assert filter_redundant(frames, 0.95) == [0, 1, 2, 3, 4]

    def test_matches_exhaustive_oracle_on_pan(self):
        # Synthetic pan: consecutive SSIM alternates between ~1 (repeats)
        # and clearly below threshold (large shifts).
        rng = np.random.default_rng(8)
        base = textured_image(rng, 48, 200)
        frames = []
        shift = 0
        for i in range(40):
            if i % 4 != 0:
                shift += 0  # repeated frame
            else:
                shift += 11
            frames.append(np.ascontiguousarray(np.roll(base, -shift, axis=1)[:, :64]))
        threshold = 0.98
        got = filter_redundant(frames, threshold)
        assert got == exhaustive_filter(frames, threshold)

    def test_output_strictly_increasing_with_zero(self):
        rng = np.random.default_rng(9)
        frames = [noise_image(rng, 32, 32) for _ in range(8)]
        kept = filter_redundant(frames, 0.9)
        assert kept[0] == 0
        assert all(b > a for a, b in zip(kept, kept[1:]))


class TestBlockMatch:
    def test_self_match(self):
        rng = np.random.default_rng(10)
        img = textured_image(rng)
        ms = block_match(img, img)
        assert len(ms) > 0
        assert np.allclose(ms.source, ms.target)
        assert np.allclose(ms.confidence, 1.0, atol=1e-9)

    def test_known_shift(self):
        rng = np.random.default_rng(11)
        base = textured_image(rng, 64, 96)
        a = np.ascontiguousarray(base[:, :80])
        b = np.ascontiguousarray(np.roll(base, 5, axis=1)[:, :80])  # shift right 5 px
        ms = block_match(a, b)
        assert len(ms) >= 5
        disp = ms.target - ms.source
        med = np.median(disp, axis=0)
        assert abs(med[0] - 5) <= 1
        assert abs(med[1] - 0) <= 1

    def test_textureless_empty(self):
        img = np.full((32, 32, 3), 128, np.uint8)
        ms = block_match(img, img)
        assert len(ms) == 0

    def test_confidences_sorted_and_in_bounds(self):
        rng = np.random.default_rng(12)
        a, b = textured_image(rng), textured_image(rng)
        ms = block_match(a, b)
        assert np.all(np.diff(ms.confidence) <= 1e-12)
        for arr in (ms.source, ms.target):
            assert np.all(arr[:, 0] >= 0) and np.all(arr[:, 0] < 64)
            assert np.all(arr[:, 1] >= 0) and np.all(arr[:, 1] < 64)

    def test_region_mask_restricts_sources(self):
        rng = np.random.default_rng(13)
        img = textured_image(rng)
        mask = np.zeros((64, 64), dtype=bool)
        mask[:, :32] = True
        ms = block_match(img, img, region_mask=mask)
        assert len(ms) > 0
        assert np.all(ms.source[:, 0] < 32)


def test_png_roundtrip(tmp_path):
    rng = np.random.default_rng(14)
    img = noise_image(rng, 24, 36)
    path = tmp_path / "frame.png"
    write_png(path, img)
    assert np.array_equal(read_png(path), img)


def test_pixel_match_set_validates():
    with pytest.raises(ValueError):
        PixelMatchSet(np.zeros((2, 2)), np.zeros((2, 2)), np.array([0.5, 1.5]))
