"""FFTs, centred magnitude spectra, log-normalisation and radial energy profiles.

The transforms are written out here rather than delegated to ``numpy.fft``:
power-of-two lengths use an iterative radix-2 Cooley-Tukey pass and every
other length goes through Bluestein's chirp-z reformulation on top of it.
All transforms operate along the last axis and broadcast over leading axes,
so a whole image is transformed with one call per axis.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyClass, EmptyInput, MismatchedBins, NotCentered

DEFAULT_BINS = 30
DEGENERATE_STD = 1e-12


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _bit_reverse_perm(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_pow2(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    if n == 1:
        return x.copy()
    a = x[..., _bit_reverse_perm(n)]
    lead = a.shape[:-1]
    half = 1
    while half < n:
        tw = np.exp(-2j * np.pi * np.arange(half) / (2 * half))
        blocks = a.reshape(*lead, n // (2 * half), 2 * half)
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        half *= 2
    return a


def _chirp(n: int) -> np.ndarray:
    # exp(-i*pi*k^2/n), with k^2 reduced mod 2n to keep the phase argument small
    k = np.arange(n, dtype=np.int64)
    return np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)


def _fft_bluestein(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    m = 1 << (2 * n - 1).bit_length()
    w = _chirp(n)
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * w
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(w)
    b[m - n + 1 :] = np.conj(w[1:])[::-1]
    conv = _ifft_pow2(_fft_pow2(a) * _fft_pow2(b))
    return conv[..., :n] * w


def _ifft_pow2(x: np.ndarray) -> np.ndarray:
    return np.conj(_fft_pow2(np.conj(x))) / x.shape[-1]


def fft1d(x, inverse: bool = False) -> np.ndarray:
    """Unscaled forward DFT (or 1/N-scaled inverse) along the last axis."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1] if x.ndim else 0
    if n == 0:
        raise EmptyInput("cannot transform an empty sequence")
    if inverse:
        return np.conj(fft1d(np.conj(x))) / n
    if _is_pow2(n):
        return _fft_pow2(x)
    return _fft_bluestein(x)


def ifft1d(x) -> np.ndarray:
    return fft1d(x, inverse=True)


def fft2d(img) -> np.ndarray:
    """2D DFT: row transforms followed by column transforms."""
    img = np.asarray(img)
    if img.ndim < 2 or img.shape[-1] == 0 or img.shape[-2] == 0:
        raise EmptyInput(f"fft2d needs a non-empty 2D grid, got shape {img.shape}")
    rows = fft1d(img)
    return np.swapaxes(fft1d(np.swapaxes(rows, -1, -2)), -1, -2)


def ifft2d(grid) -> np.ndarray:
    rows = fft1d(grid, inverse=True)
    return np.swapaxes(fft1d(np.swapaxes(rows, -1, -2), inverse=True), -1, -2)


def fftshift(grid: np.ndarray) -> np.ndarray:
    """Cyclic shift by (H//2, W//2) so DC lands at (H//2, W//2)."""
    h, w = grid.shape[-2:]
    return np.roll(grid, (h // 2, w // 2), axis=(-2, -1))


@dataclass
class MagnitudeSpectrum:
    data: np.ndarray
    centered: bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[-2:]


def magnitude(grid: np.ndarray, centered: bool = True) -> MagnitudeSpectrum:
    mag = np.abs(grid)
    if centered:
        mag = fftshift(mag)
    return MagnitudeSpectrum(mag, centered)


def log_normalize(m: MagnitudeSpectrum | np.ndarray) -> np.ndarray:
    """z-scored ``log(1 + M)`` with the population standard deviation.

    A (near-)constant spectrum maps to all zeros instead of dividing by ~0.
    """
    mag = m.data if isinstance(m, MagnitudeSpectrum) else np.asarray(m)
    return zscore(np.log1p(mag))


def zscore(values: np.ndarray) -> np.ndarray:
    mu = values.mean()
    sd = values.std()
    if sd < DEGENERATE_STD:
        return np.zeros_like(values)
    return (values - mu) / sd


@dataclass
class RadialProfile:
    energy: np.ndarray
    bin_counts: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.energy)

    def edges(self) -> np.ndarray:
        return np.arange(self.n_bins + 1) / self.n_bins


def normalized_radius(h: int, w: int) -> np.ndarray:
    """Distance of each centred-spectrum bin from DC, divided by the corner distance."""
    uc, vc = h // 2, w // 2
    u = np.arange(h)[:, None] - uc
    v = np.arange(w)[None, :] - vc
    r = np.sqrt(u * u + v * v)
    rmax = np.sqrt(uc * uc + vc * vc)
    if rmax == 0:
        return np.zeros((h, w))
    return r / rmax


def radial_bin_index(h: int, w: int, n_bins: int) -> np.ndarray:
    rho = normalized_radius(h, w)
    return np.minimum(np.floor(rho * n_bins).astype(np.intp), n_bins - 1)


def radial_profile(
    m: MagnitudeSpectrum, n_bins: int = DEFAULT_BINS, log_scale: bool = False
) -> RadialProfile:
    """Mean magnitude inside each of ``n_bins`` equal-width normalised-radius annuli.

    ``log_scale`` averages ``log(1 + M)`` instead of ``M``.
    """
    if not m.centered:
        raise NotCentered("radial profile needs a centred (fftshifted) spectrum")
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    h, w = m.shape
    idx = radial_bin_index(h, w, n_bins).ravel()
    counts = np.bincount(idx, minlength=n_bins)
    vals = np.log1p(m.data) if log_scale else m.data
    flat = vals.reshape(vals.shape[:-2] + (-1,))
    if flat.ndim == 1:
        sums = np.bincount(idx, weights=flat, minlength=n_bins)
    else:
        sums = np.stack([np.bincount(idx, weights=row, minlength=n_bins) for row in flat.reshape(-1, h * w)])
        sums = sums.reshape(flat.shape[:-1] + (n_bins,))
    energy = np.divide(sums, counts, out=np.zeros_like(sums, dtype=np.float64), where=counts > 0)
    return RadialProfile(energy, counts)


def spectrum_features(gray: np.ndarray, n_bins: int = DEFAULT_BINS) -> tuple[np.ndarray, RadialProfile]:
    """Normalised log-magnitude grid and radial profile of one grayscale image."""
    mag = magnitude(fft2d(gray), centered=True)
    return log_normalize(mag), radial_profile(mag, n_bins)


@dataclass
class ClassProfileReport:
    mean_real: np.ndarray
    std_real: np.ndarray
    mean_syn: np.ndarray
    std_syn: np.ndarray
    edges: np.ndarray = field(repr=False)

    @property
    def diff(self) -> np.ndarray:
        return self.mean_syn - self.mean_real

    @property
    def rho_mid(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def rows(self):
        for k in range(len(self.mean_real)):
            yield (k, self.rho_mid[k], self.mean_real[k], self.std_real[k],
                   self.mean_syn[k], self.std_syn[k], self.diff[k])


def class_profile_report(profiles_real, profiles_syn) -> ClassProfileReport:
    """Per-bin mean/std of each class's radial profiles (population std)."""
    if not profiles_real or not profiles_syn:
        raise EmptyClass("both classes need at least one profile")
    bins = {p.n_bins for p in list(profiles_real) + list(profiles_syn)}
    if len(bins) != 1:
        raise MismatchedBins(f"profiles disagree on bin count: {sorted(bins)}")
    real = np.stack([p.energy for p in profiles_real])
    syn = np.stack([p.energy for p in profiles_syn])
    n = bins.pop()
    return ClassProfileReport(
        real.mean(axis=0), real.std(axis=0), syn.mean(axis=0), syn.std(axis=0),
        np.arange(n + 1) / n,
    )


def write_profile_csv(profile: RadialProfile, path) -> None:
    edges = profile.edges()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "rho_lo", "rho_hi", "energy", "count"])
        for k in range(profile.n_bins):
            w.writerow([k, repr(float(edges[k])), repr(float(edges[k + 1])),
                        repr(float(profile.energy[k])), int(profile.bin_counts[k])])


def write_class_report_csv(report: ClassProfileReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "rho_mid", "mean_real", "std_real", "mean_syn", "std_syn", "diff"])
        for row in report.rows():
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
