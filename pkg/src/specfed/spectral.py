"""Frequency-domain spectrum encoding and the spectral tokenizer.

Images are ``(H, W)`` or ``(C, H, W)`` arrays.  Spectra are centre-shifted so
the DC bin sits at ``(H // 2, W // 2)``.  Radial distances are normalised by the
largest radius present on the grid, so a cutoff of 1.0 keeps every bin.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .exceptions import ConfigError, DimensionError
from .tensor import Module, Tensor, normalize_rows, relu

DEFAULT_CUTOFF = 0.25
DEFAULT_BANDS = 4
DEFAULT_SECTORS = 8


class DegenerateSpectrumWarning(RuntimeWarning):
    """A pooled spectral vector was all zeros and fell back to e1."""


@dataclass
class Spectrum:
    magnitudes: np.ndarray  # (C, H, W), centre-shifted, non-negative
    cutoff: float = 1.0

    @property
    def channels(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def height(self) -> int:
        return self.magnitudes.shape[1]

    @property
    def width(self) -> int:
        return self.magnitudes.shape[2]


@dataclass
class SpectralToken:
    values: np.ndarray
    source_client: int | None = None
    round: int | None = None


def _as_chw(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None]
    if arr.ndim != 3:
        raise DimensionError(f"expected an (H, W) or (C, H, W) image, got shape {arr.shape}")
    return arr


def fft2d(image) -> np.ndarray:
    """Unnormalised forward 2-D DFT over the last two axes."""
    return np.fft.fft2(np.asarray(image, dtype=np.float64), axes=(-2, -1))


def ifft2d(spectrum) -> np.ndarray:
    return np.fft.ifft2(spectrum, axes=(-2, -1))


def magnitude_spectrum(image) -> Spectrum:
    chw = _as_chw(image)
    mags = np.abs(np.fft.fftshift(fft2d(chw), axes=(-2, -1)))
    return Spectrum(mags)


@lru_cache(maxsize=64)
def radial_grid(height: int, width: int) -> np.ndarray:
    """Normalised distance of every centred bin from DC (max over grid = 1)."""
    dy = (np.arange(height) - height // 2) / (height / 2)
    dx = (np.arange(width) - width // 2) / (width / 2)
    r = np.hypot(dy[:, None], dx[None, :])
    peak = r.max()
    if peak > 0:
        r = r / peak
    r.setflags(write=False)
    return r


@lru_cache(maxsize=64)
def angle_grid(height: int, width: int) -> np.ndarray:
    dy = np.arange(height) - height // 2
    dx = np.arange(width) - width // 2
    theta = np.arctan2(dy[:, None], dx[None, :]).astype(np.float64)
    theta.setflags(write=False)
    return theta


def lowpass_mask(height: int, width: int, cutoff: float) -> np.ndarray:
    if not 0.0 < cutoff <= 1.0:
        raise ConfigError(f"cutoff_radius must lie in (0, 1], got {cutoff}", "model.cutoff")
    return radial_grid(height, width) <= cutoff


def lowpass_project(spec: Spectrum, cutoff_radius: float) -> Spectrum:
    """Zero every bin farther than ``cutoff_radius`` from the centre."""
    mask = lowpass_mask(spec.height, spec.width, cutoff_radius)
    return Spectrum(spec.magnitudes * mask, cutoff=min(cutoff_radius, spec.cutoff))


@lru_cache(maxsize=64)
def cell_index(height: int, width: int, cutoff: float, bands: int, sectors: int) -> np.ndarray:
    """Band-major cell id per bin, or -1 outside the low-pass disc."""
    if bands < 1 or sectors < 1:
        raise ConfigError(f"bands and sectors must be >= 1, got {bands}, {sectors}")
    r = radial_grid(height, width)
    inside = r <= cutoff
    band = np.minimum((r / cutoff * bands).astype(np.int64), bands - 1)
    frac = (angle_grid(height, width) + np.pi) / (2 * np.pi)
    sector = np.minimum((frac * sectors).astype(np.int64), sectors - 1)
    cells = np.where(inside, band * sectors + sector, -1)
    cells.setflags(write=False)
    return cells


@lru_cache(maxsize=64)
def _pooling_matrix(height: int, width: int, cutoff: float, bands: int, sectors: int) -> np.ndarray:
    cells = cell_index(height, width, cutoff, bands, sectors).reshape(-1)
    n_cells = bands * sectors
    pool = np.zeros((height * width, n_cells))
    valid = cells >= 0
    pool[np.flatnonzero(valid), cells[valid]] = 1.0
    counts = pool.sum(axis=0)
    pool[:, counts > 0] /= counts[counts > 0]
    pool.setflags(write=False)
    return pool


def freqmix(spec: Spectrum, bands: int = DEFAULT_BANDS, sectors: int = DEFAULT_SECTORS) -> np.ndarray:
    """Mean ``log(1 + magnitude)`` per (band, sector) cell of the low-pass disc.

    Returns a ``(bands * sectors, 1)`` grid in band-major order; channels are
    averaged.  Empty cells give zero.
    """
    pool = _pooling_matrix(spec.height, spec.width, float(spec.cutoff), bands, sectors)
    logmag = np.log1p(spec.magnitudes).reshape(spec.channels, -1)
    return (logmag @ pool).mean(axis=0)[:, None]


def freqmix_batch(images: np.ndarray, cutoff: float = DEFAULT_CUTOFF,
                  bands: int = DEFAULT_BANDS, sectors: int = DEFAULT_SECTORS) -> np.ndarray:
    """FreqMix descriptors for a stack of ``(N, C, H, W)`` images: ``(N, P, 1)``."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    n, c, h, w = images.shape
    lowpass_mask(h, w, cutoff)
    mags = np.abs(np.fft.fftshift(np.fft.fft2(images, axes=(-2, -1)), axes=(-2, -1)))
    pool = _pooling_matrix(h, w, float(cutoff), bands, sectors)
    desc = (np.log1p(mags).reshape(n, c, h * w) @ pool).mean(axis=1)
    return desc[:, :, None]


@lru_cache(maxsize=16)
def _cell_codes(bands: int, sectors: int) -> np.ndarray:
    codes = np.zeros((bands * sectors, bands + sectors))
    for cell in range(bands * sectors):
        codes[cell, cell // sectors] = 1.0
        codes[cell, bands + cell % sectors] = 1.0
    codes.setflags(write=False)
    return codes


def attach_cell_codes(descriptors: np.ndarray, bands: int, sectors: int) -> np.ndarray:
    """Append fixed one-hot band and sector codes to each descriptor row."""
    codes = _cell_codes(bands, sectors)
    lead = descriptors.shape[:-2]
    codes = np.broadcast_to(codes, lead + codes.shape)
    return np.concatenate([descriptors, codes], axis=-1)


@dataclass
class TokenizerParams:
    W1: np.ndarray
    W2: np.ndarray
    bands: int = DEFAULT_BANDS
    sectors: int = DEFAULT_SECTORS
    cutoff_radius: float = DEFAULT_CUTOFF

    def __post_init__(self):
        if self.bands * self.sectors < 1:
            raise ConfigError("bands * sectors must be >= 1")
        if not 0.0 < self.cutoff_radius <= 1.0:
            raise ConfigError(f"cutoff_radius must lie in (0, 1], got {self.cutoff_radius}", "model.cutoff")
        if self.W1.shape[0] != 1 + self.bands + self.sectors:
            raise DimensionError(f"W1 must have {1 + self.bands + self.sectors} rows, got {self.W1.shape}")
        if self.W1.shape[1] != self.W2.shape[0]:
            raise DimensionError(f"W1 {self.W1.shape} and W2 {self.W2.shape} do not chain")

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int = 64, dim: int = 32, **kw) -> TokenizerParams:
        bands = kw.get("bands", DEFAULT_BANDS)
        sectors = kw.get("sectors", DEFAULT_SECTORS)
        c_desc = 1 + bands + sectors
        return cls(rng.normal(0, 1 / np.sqrt(c_desc), (c_desc, hidden)),
                   rng.normal(0, 1 / np.sqrt(hidden), (hidden, dim)), **kw)


class SpectralTokenizer(Module):
    """Per-descriptor two-layer ReLU MLP, mean-pooled and unit-normalised."""

    def __init__(self, params: TokenizerParams):
        super().__init__()
        self.bands = params.bands
        self.sectors = params.sectors
        self.cutoff = params.cutoff_radius
        self.param("W1", params.W1)
        self.param("W2", params.W2)

    @property
    def dim(self) -> int:
        return self.W2.shape[1]

    def descriptors(self, images: np.ndarray) -> np.ndarray:
        desc = freqmix_batch(images, self.cutoff, self.bands, self.sectors)
        return attach_cell_codes(desc, self.bands, self.sectors)

    def __call__(self, descriptors: np.ndarray) -> Tensor:
        """Tokens ``(N, d)`` from precomputed ``(N, P, C_desc)`` descriptors."""
        hidden = relu(Tensor(descriptors) @ self.W1)
        pooled = relu(hidden @ self.W2).mean(axis=-2)
        tokens, degenerate = normalize_rows(pooled)
        if degenerate.any():
            warnings.warn(f"{int(degenerate.sum())} degenerate spectral token(s) mapped to e1",
                          DegenerateSpectrumWarning, stacklevel=2)
        return tokens


def spectral_tokenize(image, params: TokenizerParams) -> SpectralToken:
    tok = SpectralTokenizer(params)
    desc = tok.descriptors(_as_chw(image)[None])
    return SpectralToken(tok(desc).data[0].copy())


def spectrum_distance_ratio(x_i, x_j, cutoff: float = DEFAULT_CUTOFF) -> float:
    """``||LP(|F_i| - |F_j|)|| / ||(|F_i| - |F_j|)||``; 0 for identical spectra."""
    a, b = _as_chw(x_i), _as_chw(x_j)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    full, low = spectrum_distances(a, b, cutoff)
    return 0.0 if full == 0.0 else low / full


def spectrum_distances(x_i, x_j, cutoff: float = DEFAULT_CUTOFF) -> tuple[float, float]:
    """Full and low-pass L2 distances between two magnitude spectra."""
    si, sj = magnitude_spectrum(x_i), magnitude_spectrum(x_j)
    delta = si.magnitudes - sj.magnitudes
    mask = lowpass_mask(si.height, si.width, cutoff)
    return float(np.linalg.norm(delta)), float(np.linalg.norm(delta * mask))
