"""Validation protocols for saliency maps.

* removal / feed-in: zero the salient or the non-salient (channel, band) cells,
  invert, and re-score the classifier (group and instance level);
* easyPEASI-style baseline: one cell at a time replaced with matched Gaussian noise;
* KDE log-likelihood of perturbed band-power features under the original ones;
* lambda sweep, leave-one-subject-out study and generator FLOPs accounting.
"""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .diffcore import ContractError
from .explainer import ExplainerConfig, SaliencyMap, explain_epochs, group_saliency
from .models import ModelConfig, TrainHyperparams, TrainedModel, build_model, predict, train_model
from .spectral import BandPartition, Spectrum, band_powers, dft_forward, dft_inverse, zero_cells
from .synthdata import Epoch, compute_clusters, loso_splits, stack
from .textio import dumps

log = logging.getLogger(__name__)

REPORT_HEADER = ("condition", "accuracy", "n_epochs", "seed", "config_hash")


@dataclass
class RemovalReport:
    accuracy_original: float
    accuracy_remove_nonsalient: float
    accuracy_remove_salient: float
    level: str
    threshold: float | None
    n_epochs: int
    n_salient: float = 0.0

    @property
    def rn_drop(self) -> float:
        return self.accuracy_original - self.accuracy_remove_nonsalient

    @property
    def rs_drop(self) -> float:
        return self.accuracy_original - self.accuracy_remove_salient

    @property
    def gap(self) -> float:
        """RN accuracy minus RS accuracy."""
        return self.accuracy_remove_nonsalient - self.accuracy_remove_salient

    def rows(self) -> list[tuple[str, float]]:
        return [("Ori", self.accuracy_original), ("RN", self.accuracy_remove_nonsalient),
                ("RS", self.accuracy_remove_salient)]


@dataclass
class KdeReport:
    bandwidth: float
    dimension: int
    mean_log_likelihood: float
    n_original: int
    n_perturbed: int
    dropped_dimensions: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _arrays(epochs) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(epochs, tuple):
        return epochs
    X, y, _ = stack(epochs)
    return X, y


# -- removal game -----------------------------------------------------------
def threshold_split(saliency) -> np.ndarray:
    """Cells strictly above the median are salient."""
    values = saliency.mask_values if isinstance(saliency, SaliencyMap) else np.asarray(saliency, dtype=np.float64)
    return values > np.median(values)


def _accuracy_after_removal(model: TrainedModel, spec: Spectrum, y: np.ndarray, cells, partition) -> float:
    x = dft_inverse(zero_cells(spec, cells, partition))
    return float(np.mean(predict(model, x)[1] == y))


def removal_feed_in(model: TrainedModel, epochs, split: np.ndarray, partition: BandPartition) -> RemovalReport:
    """Group-level game: one salient/non-salient split applied to every epoch."""
    X, y = _arrays(epochs)
    split = np.asarray(split, dtype=bool)
    if split.shape != (X.shape[1], partition.num_bands):
        raise ContractError(f"split {split.shape} does not match ({X.shape[1]}, {partition.num_bands})")
    spec = dft_forward(X)
    ori = float(np.mean(predict(model, X)[1] == y))
    rn = _accuracy_after_removal(model, spec, y, ~split, partition)
    rs = _accuracy_after_removal(model, spec, y, split, partition)
    return RemovalReport(ori, rn, rs, "group", None, len(y), float(split.sum()))


def removal_feed_in_instance(model: TrainedModel, epochs, maps: Sequence, partition: BandPartition) -> RemovalReport:
    """Instance-level game: each epoch is split by its own map's median."""
    X, y = _arrays(epochs)
    if len(maps) != len(y):
        raise ContractError(f"{len(maps)} maps for {len(y)} epochs")
    splits = np.stack([threshold_split(m) for m in maps])  # (N, Ch, B)
    spec = dft_forward(X)
    ori = float(np.mean(predict(model, X)[1] == y))
    rn = _accuracy_after_removal(model, spec, y, ~splits, partition)
    rs = _accuracy_after_removal(model, spec, y, splits, partition)
    return RemovalReport(ori, rn, rs, "instance", None, len(y), float(splits.sum(axis=(1, 2)).mean()))


# -- easyPEASI baseline -------------------------------------------------------
def easy_peasi(model: TrainedModel, epochs, partition: BandPartition, noise_seed: int = 0,
               noise_scale: float = 1.0) -> np.ndarray:
    """Accuracy drop per (channel, band) when that cell is replaced by Gaussian noise.

    Noise is zero-mean with the dataset's per-bin standard deviation (real and
    imaginary parts separately), drawn on non-negative bins and mirrored so the
    perturbed spectrum stays Hermitian. Costs Ch x B full-dataset inferences.
    """
    X, y = _arrays(epochs)
    N, Ch, T = X.shape
    spec = dft_forward(X)
    sd_re = spec.real.std(axis=0) * noise_scale  # (Ch, T)
    sd_im = spec.imag.std(axis=0) * noise_scale
    ori = float(np.mean(predict(model, X)[1] == y))
    rng = np.random.default_rng(noise_seed)
    n_pos = partition.nonneg_bins
    self_conj = np.zeros(T, dtype=bool)
    self_conj[0] = True
    if T % 2 == 0:
        self_conj[T // 2] = True
    drops = np.zeros((Ch, partition.num_bands))
    for c in range(Ch):
        for b in range(partition.num_bands):
            pos = partition.bins_in_band(b, nonneg_only=True)
            re = spec.real.copy()
            im = spec.imag.copy()
            nre = rng.standard_normal((N, len(pos))) * sd_re[c, pos]
            nim = rng.standard_normal((N, len(pos))) * sd_im[c, pos]
            nim[:, self_conj[pos]] = 0.0
            re[:, c, pos] = nre
            im[:, c, pos] = nim
            partner = (-pos) % T
            mirror = partner >= n_pos
            re[:, c, partner[mirror]] = nre[:, mirror]
            im[:, c, partner[mirror]] = -nim[:, mirror]
            acc = float(np.mean(predict(model, dft_inverse(Spectrum(re, im)))[1] == y))
            drops[c, b] = ori - acc
    return drops


# -- KDE -----------------------------------------------------------------------
def gaussian_kde_logpdf(train: np.ndarray, query: np.ndarray, bandwidth: float) -> np.ndarray:
    """Log density of an isotropic Gaussian KDE with scalar bandwidth at each query row."""
    train = np.atleast_2d(train)
    query = np.atleast_2d(query)
    n, d = train.shape
    if query.shape[1] != d:
        raise ContractError(f"query dimension {query.shape[1]} differs from {d}")
    if bandwidth <= 0:
        raise ContractError("bandwidth must be positive")
    sq = (np.sum(query ** 2, axis=1)[:, None] + np.sum(train ** 2, axis=1)[None, :]
          - 2.0 * query @ train.T)
    sq = np.maximum(sq, 0.0)
    log_norm = -0.5 * d * np.log(2 * np.pi * bandwidth ** 2) - np.log(n)
    return logsumexp(-0.5 * sq / bandwidth ** 2, axis=1) + log_norm


def scott_bandwidth(n: int, d: int) -> float:
    return float(n ** (-1.0 / (d + 4)))


def band_power_features(X: np.ndarray, partition: BandPartition) -> np.ndarray:
    return band_powers(dft_forward(X), partition).reshape(len(X), -1)


def kde_discrepancy(original_epochs, perturbed_epochs, partition: BandPartition) -> KdeReport:
    """Mean log-likelihood of perturbed band-power features under a KDE of the originals.

    Features are z-scored with the original set's statistics; constant
    dimensions are dropped (and noted). Bandwidth follows Scott's rule.
    """
    Xo = original_epochs if isinstance(original_epochs, np.ndarray) else _arrays(original_epochs)[0]
    Xp = perturbed_epochs if isinstance(perturbed_epochs, np.ndarray) else _arrays(perturbed_epochs)[0]
    if len(Xo) == 0 or len(Xp) == 0:
        raise ContractError("both epoch sets must be non-empty")
    fo = band_power_features(Xo, partition)
    fp = band_power_features(Xp, partition)
    mu, sd = fo.mean(axis=0), fo.std(axis=0)
    keep = sd > 1e-12 * max(1.0, float(np.abs(mu).max()))
    dropped = np.flatnonzero(~keep).tolist()
    notes = []
    if dropped:
        msg = f"dropped {len(dropped)} zero-variance feature dimension(s): {dropped}"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    if not keep.any():
        raise ContractError("all feature dimensions are constant")
    zo = (fo[:, keep] - mu[keep]) / sd[keep]
    zp = (fp[:, keep] - mu[keep]) / sd[keep]
    n, d = zo.shape
    h = scott_bandwidth(n, d)
    ll = gaussian_kde_logpdf(zo, zp, h)
    return KdeReport(h, d, float(ll.mean()), n, len(zp), dropped, notes)


# -- sweeps and studies -------------------------------------------------------------
@dataclass
class SweepRow:
    lam: float
    kde_score: float
    rs_drop: float
    rn_drop: float
    report: RemovalReport
    group_map: SaliencyMap


def lambda_sweep(model: TrainedModel, epochs, clusters, lambdas: Sequence[float], seed: int = 0,
                 base_config: ExplainerConfig | None = None, explain_set: Sequence[Epoch] | None = None,
                 partition: BandPartition | None = None) -> list[SweepRow]:
    """Explain once per lambda; score KDE of the perturbed epochs and the group RS drop.

    Removal and the KDE reference use ``epochs``; explanations use
    ``explain_set`` when given (a subset keeps the sweep affordable).
    """
    if not len(lambdas):
        raise ContractError("no lambda values given")
    base = base_config or ExplainerConfig()
    explain_set = epochs if explain_set is None else explain_set
    Xe, ye = _arrays(epochs)
    partition = partition or _partition_for(Xe, base)
    rows = []
    for lam in lambdas:
        cfg = ExplainerConfig(**{**base.to_dict(), "lam": float(lam)})
        exps = explain_epochs(model, explain_set, clusters, cfg, seed=seed)
        gmap = group_saliency([e.saliency for e in exps])
        report = removal_feed_in(model, (Xe, ye), threshold_split(gmap), partition)
        kde = kde_discrepancy(Xe, np.stack([e.perturbed for e in exps]), partition)
        rows.append(SweepRow(float(lam), kde.mean_log_likelihood, report.rs_drop, report.rn_drop, report, gmap))
        log.info("lambda=%g kde=%.3f rs_drop=%.3f", lam, kde.mean_log_likelihood, report.rs_drop)
    return rows


def _partition_for(X: np.ndarray, cfg: ExplainerConfig) -> BandPartition:
    from .spectral import make_partition
    return make_partition(X.shape[-1], cfg.num_bands)


@dataclass
class LosoSplitResult:
    subject: int
    report: RemovalReport
    group_map: SaliencyMap
    instance_maps: list[SaliencyMap]
    train_accuracy: float


@dataclass
class LosoResult:
    splits: list[LosoSplitResult]
    unseen_map: SaliencyMap


def loso_study(epochs, model_config: ModelConfig | None = None,
               train_hyper: TrainHyperparams | None = None, explainer_config: ExplainerConfig | None = None,
               seed: int = 0, max_explained: int | None = None) -> LosoResult:
    """Train on all subjects but one, explain the held-out subject, and play the removal game on it.

    ``max_explained`` caps how many held-out epochs per split are explained
    (evenly spaced, both classes kept); removal is scored on the whole held-out set.
    ``epochs`` may be a flat epoch list or precomputed ``loso_splits`` output.
    """
    model_config = model_config or ModelConfig()
    cfg = explainer_config or ExplainerConfig()
    results = []
    all_maps: list[SaliencyMap] = []
    splits = epochs if len(epochs) and isinstance(epochs[0], tuple) else loso_splits(epochs)
    for train, held in splits:
        subject = held[0].subject_id
        model = train_model(build_model(model_config), train, train_hyper)
        clusters = compute_clusters(train)
        chosen = held if not max_explained or max_explained >= len(held) else \
            [held[i] for i in np.linspace(0, len(held) - 1, max_explained).round().astype(int)]
        exps = explain_epochs(model, chosen, clusters, cfg, seed=seed)
        maps = [e.saliency for e in exps]
        gmap = group_saliency(maps)
        gmap.meta["held_out_subject"] = subject
        Xh, yh, _ = stack(held)
        partition = _partition_for(Xh, cfg)
        report = removal_feed_in(model, (Xh, yh), threshold_split(gmap), partition)
        results.append(LosoSplitResult(subject, report, gmap, maps, model.metadata.get("train_accuracy", float("nan"))))
        all_maps.extend(maps)
        log.info("LOSO subject %d: Ori %.3f RN %.3f RS %.3f", subject, report.accuracy_original,
                 report.accuracy_remove_nonsalient, report.accuracy_remove_salient)
    unseen = group_saliency(all_maps)
    unseen.meta["kind"] = "unseen_subjects"
    return LosoResult(results, unseen)


# -- FLOPs -------------------------------------------------------------------------
@dataclass(frozen=True)
class FlopsReport:
    two_branch: int
    gru: int
    two_branch_per_channel: int  # the single-channel count (two T x T maps)
    n_channels: int
    n_bins: int


def generator_flops(n_channels: int, n_bins: int, gru_hidden: int | None = None) -> FlopsReport:
    """Closed-form cost of the dense two-branch generator and of a one-layer GRU alternative.

    two_branch = 2 branches x Ch channels x 2 T^2; gru = 6 D^2 T with D the
    hidden size (defaults to Ch). The GRU is never built.
    """
    D = n_channels if gru_hidden is None else gru_hidden
    T = n_bins
    return FlopsReport(2 * n_channels * 2 * T * T, 6 * D * D * T, 2 * T * T, n_channels, n_bins)


# -- report files -----------------------------------------------------------------
def report_csv(report: RemovalReport, seed: int, cfg_hash: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for cond, acc in report.rows():
        w.writerow((cond, format(acc, ".17g"), report.n_epochs, seed, cfg_hash))
    return buf.getvalue()


def write_report(path, report: RemovalReport, seed: int, cfg_hash: str, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_csv(report, seed, cfg_hash))
    meta = {"record": "removal_report", "level": report.level, "n_epochs": report.n_epochs,
            "n_salient": report.n_salient, "rn_drop": report.rn_drop, "rs_drop": report.rs_drop,
            "seed": seed, "config_hash": cfg_hash, **(extra or {})}
    path.with_suffix(".meta.jsonl").write_text(dumps(meta) + "\n")


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows
