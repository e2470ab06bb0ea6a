"""Full-spectrum DFT utilities and the band partition behind the scalable mask.

Bands are defined over the non-negative frequencies 0..T//2 and every
negative-frequency bin inherits the band of its conjugate partner, so any
band-constant mask is Hermitian-compatible by construction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ContractError, DimensionError, Tensor, as_tensor, take


@dataclass(frozen=True)
class Spectrum:
    """Complex spectrum split into real and imaginary float arrays of shape (..., Ch, T)."""

    real: np.ndarray
    imag: np.ndarray

    def __post_init__(self):
        if np.shape(self.real) != np.shape(self.imag):
            raise DimensionError(f"real {np.shape(self.real)} and imag {np.shape(self.imag)} differ")

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "Spectrum":
        z = np.asarray(z)
        return cls(np.ascontiguousarray(z.real, dtype=np.float64), np.ascontiguousarray(z.imag, dtype=np.float64))

    def to_complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    @property
    def bins(self) -> int:
        return self.real.shape[-1]

    @property
    def channels(self) -> int:
        return self.real.shape[-2]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real.shape


@dataclass(frozen=True)
class BandPartition:
    num_bins: int
    num_bands: int
    band_of_bin: np.ndarray

    @property
    def nonneg_bins(self) -> int:
        return self.num_bins // 2 + 1

    def bins_in_band(self, band: int, nonneg_only: bool = False) -> np.ndarray:
        limit = self.nonneg_bins if nonneg_only else self.num_bins
        return np.flatnonzero(self.band_of_bin[:limit] == band)

    def band_sizes(self) -> list[int]:
        """Number of non-negative-frequency bins per band."""
        return np.bincount(self.band_of_bin[: self.nonneg_bins], minlength=self.num_bands).tolist()

    def band_edges_hz(self, sample_rate: float) -> list[tuple[float, float]]:
        res = sample_rate / self.num_bins
        out = []
        for b in range(self.num_bands):
            bins = self.bins_in_band(b, nonneg_only=True)
            out.append((bins[0] * res, bins[-1] * res))
        return out


def conjugate_index(num_bins: int) -> np.ndarray:
    """Index of the conjugate partner of every bin: (T - k) mod T."""
    return (-np.arange(num_bins)) % num_bins


def dft_forward(x) -> Spectrum:
    """Unnormalized DFT along the last axis: X[k] = sum_t x[t] exp(-2 pi i k t / T)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 1 or x.shape[-1] < 2:
        raise DimensionError(f"need at least 2 samples along the time axis, got shape {x.shape}")
    return Spectrum.from_complex(np.fft.fft(x, axis=-1))


def dft_inverse(spec: Spectrum) -> np.ndarray:
    """Inverse DFT with 1/T scaling; the real part is kept."""
    return np.fft.ifft(spec.to_complex(), axis=-1).real


def inverse_real(re, im) -> Tensor:
    """Differentiable inverse DFT of (re, im) tensors, keeping the real part.

    The map is linear, so the backward pass is the adjoint: a forward FFT of
    the upstream gradient scaled by 1/T.
    """
    re, im = as_tensor(re), as_tensor(im)
    if re.shape != im.shape:
        raise DimensionError(f"real {re.shape} and imag {im.shape} differ")
    T = re.shape[-1]
    out = np.fft.ifft(re.data + 1j * im.data, axis=-1).real

    def backward(g):
        G = np.fft.fft(g, axis=-1) / T
        return G.real, G.imag

    return Tensor.from_op(out, (re, im), backward, "inverse_real")


def make_partition(num_bins: int, num_bands: int) -> BandPartition:
    """Split bins 0..T//2 into contiguous, near-equal bands; lower bands take the remainder."""
    if num_bins < 2:
        raise ContractError(f"num_bins must be >= 2, got {num_bins}")
    n_pos = num_bins // 2 + 1
    if not 1 <= num_bands <= n_pos:
        raise ContractError(f"num_bands must lie in [1, {n_pos}] for {num_bins} bins, got {num_bands}")
    base, rem = divmod(n_pos, num_bands)
    sizes = [base + 1 if b < rem else base for b in range(num_bands)]
    pos = np.repeat(np.arange(num_bands), sizes)
    band_of_bin = np.empty(num_bins, dtype=np.intp)
    band_of_bin[:n_pos] = pos
    neg = np.arange(n_pos, num_bins)
    band_of_bin[neg] = pos[num_bins - neg]
    band_of_bin.setflags(write=False)
    return BandPartition(num_bins, num_bands, band_of_bin)


def expand_mask(mask, partition: BandPartition):
    """Repeat a (..., Ch, B) band mask out to (..., Ch, T) bins.

    Works on plain arrays and on tensors (gradient sums over each band's bins).
    """
    B = (mask.shape if isinstance(mask, Tensor) else np.shape(mask))[-1]
    if B != partition.num_bands:
        raise ContractError(f"mask has {B} bands but the partition has {partition.num_bands}")
    if isinstance(mask, Tensor):
        return take(mask, partition.band_of_bin, axis=-1)
    return np.take(np.asarray(mask, dtype=np.float64), partition.band_of_bin, axis=-1)


def enforce_hermitian(spec: Spectrum) -> Spectrum:
    """Project onto conjugate-symmetric spectra: Y[k] = (X[k] + conj(X[-k])) / 2."""
    idx = conjugate_index(spec.bins)
    real = 0.5 * (spec.real + spec.real[..., idx])
    imag = 0.5 * (spec.imag - spec.imag[..., idx])
    return Spectrum(real, imag)


def hermitian_parts(re: Tensor, im: Tensor) -> tuple[Tensor, Tensor]:
    """Tensor version of :func:`enforce_hermitian`; self-conjugate bins get zero imaginary part."""
    idx = conjugate_index(re.shape[-1])
    return 0.5 * (re + take(re, idx)), 0.5 * (im - take(im, idx))


def band_powers(spec: Spectrum, partition: BandPartition) -> np.ndarray:
    """Mean |X|^2 over each band's non-negative-frequency bins -> (..., Ch, B)."""
    if spec.bins != partition.num_bins:
        raise ContractError(f"spectrum has {spec.bins} bins, partition expects {partition.num_bins}")
    n_pos = partition.nonneg_bins
    power = (spec.real[..., :n_pos] ** 2 + spec.imag[..., :n_pos] ** 2)
    labels = partition.band_of_bin[:n_pos]
    counts = np.bincount(labels, minlength=partition.num_bands)
    onehot = np.zeros((n_pos, partition.num_bands))
    onehot[np.arange(n_pos), labels] = 1.0
    return (power @ onehot) / counts


def cell_bin_mask(cells: np.ndarray, partition: BandPartition) -> np.ndarray:
    """Boolean (..., Ch, T) selection of every bin (both conjugate partners) of the chosen (Ch, B) cells."""
    cells = np.asarray(cells, dtype=bool)
    if cells.shape[-1] != partition.num_bands:
        raise ContractError(f"cell grid has {cells.shape[-1]} bands, partition has {partition.num_bands}")
    return np.take(cells, partition.band_of_bin, axis=-1)


def zero_cells(spec: Spectrum, cells: np.ndarray, partition: BandPartition) -> Spectrum:
    keep = ~cell_bin_mask(cells, partition)
    return Spectrum(spec.real * keep, spec.imag * keep)
