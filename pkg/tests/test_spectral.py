import cmath
import math
import warnings

import numpy as np
import pytest

from specfed.exceptions import ConfigError
from specfed.spectral import (DegenerateSpectrumWarning, Spectrum, SpectralTokenizer, TokenizerParams,
                              attach_cell_codes, fft2d, freqmix, freqmix_batch, ifft2d, lowpass_mask,
                              lowpass_project, magnitude_spectrum, spectral_tokenize, spectrum_distance_ratio)
from specfed.tensor import Tensor, gradcheck


def direct_dft(x):
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for i in range(h):
                for j in range(w):
                    acc += x[i, j] * cmath.exp(-2j * math.pi * (u * i / h + v * j / w))
            out[u, v] = acc
    return out


class TestFFT:
    def test_constant_image(self):
        spec = fft2d(np.full((4, 4), 0.7))
        assert spec[0, 0] == pytest.approx(16 * 0.7)
        rest = spec.copy()
        rest[0, 0] = 0
        assert np.max(np.abs(rest)) < 1e-12

    def test_impulse_has_flat_magnitude(self):
        x = np.zeros((6, 6))
        x[0, 0] = 1
        np.testing.assert_allclose(np.abs(fft2d(x)), 1.0, rtol=0, atol=1e-15)

    def test_matches_direct_summation(self):
        x = np.random.default_rng(0).normal(size=(8, 8))
        ref = direct_dft(x)
        assert np.max(np.abs(fft2d(x) - ref)) <= 1e-9 * np.max(np.abs(ref))

    @pytest.mark.parametrize("shape", [(1, 1), (2, 3), (7, 5), (16, 16), (33, 20), (64, 64)])
    def test_roundtrip_and_parseval(self, shape):
        x = np.random.default_rng(shape[0] * 100 + shape[1]).normal(size=shape)
        spec = fft2d(x)
        back = ifft2d(spec)
        assert np.linalg.norm(back - x) <= 1e-9 * np.linalg.norm(x)
        energy = np.sum(np.abs(spec) ** 2)
        assert abs(energy - x.size * np.sum(x ** 2)) <= 1e-9 * energy


class TestMagnitudeSpectrum:
    def test_constant_image_single_centre_bin(self):
        mags = magnitude_spectrum(np.full((5, 6), 0.3)).magnitudes[0]
        assert mags[2, 3] == pytest.approx(9.0)
        mags[2, 3] = 0
        assert mags.max() < 1e-12

    def test_point_symmetry_for_real_input(self):
        x = np.random.default_rng(1).normal(size=(8, 8))
        mags = magnitude_spectrum(x).magnitudes[0]
        # with DC at (4, 4) the mirror of (i, j) is (8 - i, 8 - j) mod 8
        for i in range(8):
            for j in range(8):
                assert mags[i, j] == pytest.approx(mags[(8 - i) % 8, (8 - j) % 8], abs=1e-12)

    def test_composition(self):
        x = np.random.default_rng(2).normal(size=(7, 9))
        np.testing.assert_array_equal(magnitude_spectrum(x).magnitudes[0], np.fft.fftshift(np.abs(fft2d(x))))

    def test_non_negative(self):
        assert magnitude_spectrum(np.random.default_rng(3).normal(size=(2, 8, 8))).magnitudes.min() >= 0


class TestLowpass:
    def spec(self, seed=0, shape=(1, 9, 9)):
        return Spectrum(np.abs(np.random.default_rng(seed).normal(size=shape)))

    def test_full_cutoff_is_identity(self):
        s = self.spec()
        np.testing.assert_array_equal(lowpass_project(s, 1.0).magnitudes, s.magnitudes)

    def test_tiny_cutoff_keeps_only_centre(self):
        s = self.spec(shape=(1, 5, 5))
        out = lowpass_project(s, 1e-9).magnitudes[0]
        assert out[2, 2] == s.magnitudes[0, 2, 2]
        out[2, 2] = 0
        assert not out.any()

    @pytest.mark.parametrize("cutoff", [0.1, 0.25, 0.6])
    def test_idempotent_and_non_increasing(self, cutoff):
        s = self.spec(seed=4)
        once = lowpass_project(s, cutoff)
        np.testing.assert_array_equal(lowpass_project(once, cutoff).magnitudes, once.magnitudes)
        assert np.all(once.magnitudes <= s.magnitudes)

    @pytest.mark.parametrize("cutoff", [0.0, -0.1, 1.5])
    def test_invalid_cutoff(self, cutoff):
        with pytest.raises(ConfigError):
            lowpass_mask(8, 8, cutoff)


def brute_force_freqmix(mags, cutoff, bands, sectors):
    """Per-pixel binning in plain Python."""
    c, h, w = mags.shape
    cy, cx = h // 2, w // 2
    rmax = max(math.hypot((i - cy) / (h / 2), (j - cx) / (w / 2)) for i in range(h) for j in range(w))
    sums = [0.0] * (bands * sectors)
    counts = [0] * (bands * sectors)
    for i in range(h):
        for j in range(w):
            r = math.hypot((i - cy) / (h / 2), (j - cx) / (w / 2)) / rmax
            if r > cutoff:
                continue
            band = min(int(r / cutoff * bands), bands - 1)
            theta = math.atan2(i - cy, j - cx)
            sector = min(int((theta + math.pi) / (2 * math.pi) * sectors), sectors - 1)
            cell = band * sectors + sector
            for ch in range(c):
                sums[cell] += math.log1p(mags[ch, i, j]) / c
            counts[cell] += 1
    return np.array([s / n if n else 0.0 for s, n in zip(sums, counts)])[:, None]


class TestFreqMix:
    def test_zero_spectrum(self):
        assert not freqmix(Spectrum(np.zeros((1, 8, 8)))).any()

    def test_single_cell_is_disc_mean(self):
        mags = np.abs(np.random.default_rng(5).normal(size=(1, 12, 12)))
        spec = Spectrum(mags, cutoff=0.5)
        inside = lowpass_mask(12, 12, 0.5)
        assert freqmix(spec, 1, 1)[0, 0] == pytest.approx(np.log1p(mags[0][inside]).mean(), rel=1e-13)

    @pytest.mark.parametrize("shape,cutoff,bands,sectors", [
        ((1, 16, 16), 0.5, 2, 4), ((2, 9, 11), 0.8, 2, 4), ((1, 32, 32), 0.25, 4, 8), ((3, 10, 10), 1.0, 3, 5)])
    def test_matches_per_pixel_binning(self, shape, cutoff, bands, sectors):
        mags = np.abs(np.random.default_rng(sum(shape)).normal(size=shape)) * 10
        got = freqmix(Spectrum(mags, cutoff=cutoff), bands, sectors)
        np.testing.assert_allclose(got, brute_force_freqmix(mags, cutoff, bands, sectors), rtol=1e-12, atol=1e-14)

    def test_batch_agrees_with_single(self):
        imgs = np.random.default_rng(6).random((3, 1, 16, 16))
        batch = freqmix_batch(imgs, 0.25, 4, 8)
        for img, row in zip(imgs, batch):
            np.testing.assert_allclose(row, freqmix(Spectrum(magnitude_spectrum(img).magnitudes, 0.25)), rtol=1e-12)

    def test_cell_codes_are_one_hot_pairs(self):
        desc = attach_cell_codes(np.zeros((2, 6, 1)), 2, 3)
        assert desc.shape == (2, 6, 6)
        assert np.all(desc[..., 1:].sum(-1) == 2)
        assert desc[0, 4, 1:].tolist() == [0, 1, 0, 1, 0]


def params(seed=0, hidden=8, dim=5, bands=2, sectors=3):
    return TokenizerParams.init(np.random.default_rng(seed), hidden=hidden, dim=dim, bands=bands, sectors=sectors)


class TestTokenizer:
    def test_identical_images_identical_tokens(self):
        img = np.random.default_rng(7).random((16, 16))
        p = params()
        assert np.array_equal(spectral_tokenize(img, p).values, spectral_tokenize(img.copy(), p).values)

    @pytest.mark.parametrize("seed", range(5))
    def test_unit_norm(self, seed):
        img = np.random.default_rng(seed).random((1, 16, 16)) * (seed + 1)
        assert abs(np.linalg.norm(spectral_tokenize(img, params(seed)).values) - 1) <= 1e-9

    def test_degenerate_token_warns_and_maps_to_e1(self):
        p = params()
        p.W2[:] = 0.0
        with pytest.warns(DegenerateSpectrumWarning):
            tok = spectral_tokenize(np.zeros((8, 8)), p)
        assert tok.values.tolist() == [1.0, 0, 0, 0, 0]

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients_wrt_mlp(self, seed):
        rng = np.random.default_rng(seed)
        tok = SpectralTokenizer(params(seed))
        desc = tok.descriptors(rng.random((3, 1, 16, 16)))
        probe = Tensor(rng.normal(size=(3, 5)))
        with warnings.catch_warnings():
            warnings.simplefilter("error", DegenerateSpectrumWarning)
            err = gradcheck(lambda: (tok(desc) * probe).sum(), [tok.W1, tok.W2])
        assert err < 1e-4

    def test_bad_shapes_rejected(self):
        with pytest.raises(Exception):
            TokenizerParams(np.zeros((3, 4)), np.zeros((4, 2)), bands=2, sectors=3)


class TestDistanceRatio:
    def test_identical_is_zero(self):
        x = np.random.default_rng(8).random((16, 16))
        assert spectrum_distance_ratio(x, x) == 0.0

    def test_checkerboard_difference_is_outside_passband(self):
        x = np.random.default_rng(9).random((16, 16))
        checker = 0.1 * (-1.0) ** np.add.outer(np.arange(16), np.arange(16))
        assert spectrum_distance_ratio(x, x + checker, 0.25) < 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        r = spectrum_distance_ratio(rng.random((12, 12)), rng.random((12, 12)), rng.uniform(0.05, 1.0))
        assert 0.0 <= r <= 1.0
