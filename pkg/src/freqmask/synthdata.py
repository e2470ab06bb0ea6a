"""Multi-subject synthetic EEG-like epochs with a known discriminative (channel, band) set.

Each subject has its own DC offsets, per-band oscillation amplitudes and
preferred phases, so epochs cluster by subject. Class-1 epochs carry an extra
oscillation inside one band on a subset of channels; that (channel, band)
set is the ground truth a saliency method should recover.

All frequencies sit exactly on DFT bins, so band powers are phase-invariant.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcore import ContractError
from .spectral import Spectrum, dft_forward, make_partition
from .textio import LoadError, read_lines, require, write_lines


@dataclass(frozen=True)
class Epoch:
    data: np.ndarray
    subject_id: int
    label: int
    sample_rate: float = 200.0


@dataclass
class SynthConfig:
    n_channels: int = 8
    sample_rate: float = 200.0
    epoch_seconds: float = 2.0
    num_bands: int = 10
    discriminative_band: int = 1
    informative_channels: tuple[int, ...] | None = None  # None -> first half
    class_gap: float = 0.3
    noise_std: float = 0.05
    background_amplitude: float = 0.1
    amplitude_spread: float = 0.3  # log-normal sigma of per-subject amplitudes
    offset_scale: float = 0.3
    phase_noise: tuple[float, float] = (0.1, 0.4)  # per-channel jitter range, in units of pi

    @property
    def n_samples(self) -> int:
        return int(round(self.sample_rate * self.epoch_seconds))

    def resolved_informative(self) -> tuple[int, ...]:
        if self.informative_channels is None:
            return tuple(range(self.n_channels // 2))
        return tuple(self.informative_channels)


@dataclass(frozen=True)
class GroundTruth:
    informative: np.ndarray  # (Ch, B) bool
    discriminative_band: int
    informative_channels: tuple[int, ...]
    class_bins: tuple[int, ...]

    def to_record(self) -> dict:
        return {
            "record": "ground_truth",
            "discriminative_band": self.discriminative_band,
            "informative_channels": list(self.informative_channels),
            "class_bins": list(self.class_bins),
            "informative": self.informative.astype(int).tolist(),
        }


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: int
    amplitudes: np.ndarray  # (Ch, B) background amplitude per band
    phases: np.ndarray  # (Ch, B) preferred phase
    phase_noise: np.ndarray  # (Ch,) jitter half-width in radians
    offset: np.ndarray  # (Ch,)


@dataclass
class ClusterSet:
    centers: dict[int, np.ndarray]
    counts: dict[int, int]
    frequency_samples: dict[int, Spectrum] = field(repr=False)  # stacked (N_j, Ch, T)

    @property
    def subject_ids(self) -> list[int]:
        return sorted(self.centers)


def _band_center_bins(partition) -> list[int]:
    return [int(np.median(partition.bins_in_band(b, nonneg_only=True))) for b in range(partition.num_bands)]


def class_signal_bins(config: SynthConfig) -> tuple[int, ...]:
    """Bins used for the class-1 oscillation: the band's interior, away from its edges and center."""
    part = make_partition(config.n_samples, config.num_bands)
    bins = part.bins_in_band(config.discriminative_band, nonneg_only=True)
    bins = bins[bins > 0]
    if len(bins) < 3:
        return tuple(int(b) for b in bins)
    lo = bins[0] + max(1, len(bins) // 10)
    hi = lo + max(1, len(bins) // 4)
    return tuple(int(b) for b in range(lo, hi + 1) if b in bins)


def make_profiles(rng: np.random.Generator, n_subjects: int, config: SynthConfig) -> list[SubjectProfile]:
    Ch, B = config.n_channels, config.num_bands
    falloff = 1.0 / (1.0 + 0.3 * np.arange(B))
    lo, hi = config.phase_noise
    profiles = []
    for s in range(n_subjects):
        amps = config.background_amplitude * falloff[None, :] * rng.lognormal(0.0, config.amplitude_spread, (Ch, B))
        phases = rng.uniform(0, 2 * np.pi, (Ch, B))
        noise = np.pi * rng.uniform(lo, hi, Ch)
        offset = config.offset_scale * rng.standard_normal(Ch)
        profiles.append(SubjectProfile(s, amps, phases, noise, offset))
    return profiles


def generate_dataset(seed: int, n_subjects: int = 6, epochs_per_subject_per_class: int = 80,
                     config: SynthConfig | None = None) -> tuple[list[Epoch], GroundTruth]:
    config = config or SynthConfig()
    if n_subjects < 2:
        raise ContractError("need at least 2 subjects")
    if epochs_per_subject_per_class < 1:
        raise ContractError("need at least one epoch per subject and class")
    T = config.n_samples
    part = make_partition(T, config.num_bands)
    if not 0 <= config.discriminative_band < config.num_bands:
        raise ContractError(f"discriminative_band {config.discriminative_band} outside 0..{config.num_bands - 1}")
    informative = config.resolved_informative()
    if not informative or any(not 0 <= c < config.n_channels for c in informative):
        raise ContractError(f"invalid informative channels {informative}")
    cls_bins = class_signal_bins(config)
    if not cls_bins:
        raise ContractError("discriminative band has no usable non-DC bins")

    rng = np.random.default_rng(seed)
    profiles = make_profiles(rng, n_subjects, config)
    centers = np.array(_band_center_bins(part))
    t = np.arange(T)
    # (B, T) angular phase ramps of the background oscillations
    ramps = 2 * np.pi * centers[:, None] * t[None, :] / T
    info_idx = np.array(informative)

    epochs: list[Epoch] = []
    for prof in profiles:
        for label in (0, 1):
            for _ in range(epochs_per_subject_per_class):
                jitter = rng.uniform(-1, 1, (config.n_channels, config.num_bands)) * prof.phase_noise[:, None]
                phase = prof.phases + jitter
                x = np.einsum("cb,cbt->ct", prof.amplitudes, np.cos(ramps[None, :, :] + phase[:, :, None]))
                x += prof.offset[:, None]
                x += config.noise_std * rng.standard_normal((config.n_channels, T))
                k = cls_bins[rng.integers(len(cls_bins))]
                phi = rng.uniform(0, 2 * np.pi)
                gain = rng.uniform(0.8, 1.2)
                if label == 1 and config.class_gap > 0:
                    x[info_idx] += config.class_gap * gain * np.cos(2 * np.pi * k * t / T + phi)
                epochs.append(Epoch(x, prof.subject_id, label, config.sample_rate))

    grid = np.zeros((config.n_channels, config.num_bands), dtype=bool)
    grid[info_idx, config.discriminative_band] = True
    return epochs, GroundTruth(grid, config.discriminative_band, informative, cls_bins)


def stack(epochs: Sequence[Epoch]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(N, Ch, T) data, (N,) labels, (N,) subject ids."""
    X = np.stack([e.data for e in epochs])
    y = np.array([e.label for e in epochs], dtype=int)
    s = np.array([e.subject_id for e in epochs], dtype=int)
    return X, y, s


def compute_clusters(train_epochs: Sequence[Epoch]) -> ClusterSet:
    """Per-subject time-domain centers plus each subject's spectra."""
    groups: dict[int, list[np.ndarray]] = {}
    for e in train_epochs:
        groups.setdefault(int(e.subject_id), []).append(e.data)
    if not groups:
        raise ContractError("cannot cluster an empty training set")
    centers, counts, spectra = {}, {}, {}
    for sid in sorted(groups):
        arr = np.stack(groups[sid])
        if len(arr) == 0:
            raise ContractError(f"subject {sid} has no epochs")
        centers[sid] = arr.mean(axis=0)
        counts[sid] = len(arr)
        spectra[sid] = dft_forward(arr)
    return ClusterSet(centers, counts, spectra)


def select_target_cluster(x, clusters: ClusterSet) -> int:
    """Subject whose center is nearest in flattened Euclidean distance; ties to the lowest id."""
    data = x.data if isinstance(x, Epoch) else np.asarray(x)
    if not clusters.centers:
        raise ContractError("no clusters to choose from")
    best, best_d = None, np.inf
    for sid in clusters.subject_ids:
        d = float(np.linalg.norm((data - clusters.centers[sid]).ravel()))
        if d < best_d:
            best, best_d = sid, d
    return best


def loso_splits(epochs: Sequence[Epoch]) -> list[tuple[list[Epoch], list[Epoch]]]:
    subjects = sorted({e.subject_id for e in epochs})
    if len(subjects) < 2:
        raise ContractError("leave-one-subject-out needs at least 2 subjects")
    return [([e for e in epochs if e.subject_id != s], [e for e in epochs if e.subject_id == s])
            for s in subjects]


# -- persistence --------------------------------------------------------
def save_dataset(path, epochs: Sequence[Epoch], truth: GroundTruth) -> None:
    def records():
        yield truth.to_record()
        for e in epochs:
            yield {"record": "epoch", "subject_id": e.subject_id, "label": e.label,
                   "sample_rate": e.sample_rate, "data": e.data}

    write_lines(path, records())


def load_dataset(path) -> tuple[list[Epoch], GroundTruth]:
    path = Path(path)
    epochs, truth = [], None
    for i, rec in enumerate(read_lines(path), 1):
        kind = require(rec, "record", path, i)
        if kind == "ground_truth":
            try:
                grid = np.array(require(rec, "informative", path, i), dtype=bool)
                truth = GroundTruth(grid, int(require(rec, "discriminative_band", path, i)),
                                    tuple(require(rec, "informative_channels", path, i)),
                                    tuple(require(rec, "class_bins", path, i)))
            except (TypeError, ValueError) as exc:
                raise LoadError(path, f"record {i}: bad ground_truth ({exc})") from exc
        elif kind == "epoch":
            data = require(rec, "data", path, i)
            try:
                arr = np.array(data, dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise LoadError(path, f"record {i}: field 'data' is not a numeric grid") from exc
            if arr.ndim != 2 or not np.all(np.isfinite(arr)):
                raise LoadError(path, f"record {i}: field 'data' must be a finite Ch x T grid")
            epochs.append(Epoch(arr, int(require(rec, "subject_id", path, i)), int(require(rec, "label", path, i)),
                                float(rec.get("sample_rate", 200.0))))
        else:
            raise LoadError(path, f"record {i}: unknown record type {kind!r}")
    if truth is None:
        raise LoadError(path, "missing ground_truth record")
    if not epochs:
        raise LoadError(path, "no epoch records")
    return epochs, truth


def config_dict(config: SynthConfig) -> dict:
    d = asdict(config)
    d["informative_channels"] = list(config.resolved_informative())
    d["phase_noise"] = list(config.phase_noise)
    return d
