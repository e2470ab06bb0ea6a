"""Frequency-domain mask search.

For one epoch ``x`` and a fixed classifier ``f`` this learns a band mask
``M`` (sigmoid of free logits) and a two-branch dense perturbation generator
by minimizing

    CE(f(x_hat), softmax f(x)) + mean(M) + mean|x_pert| + lam * alignment

where ``x_hat = idft(X * M + (1 - M) * x_pert)`` and the alignment term is the
mean squared complex distance between ``x_pert`` and the spectra of the
subject cluster nearest to ``x``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, DimensionError, Tensor
from .models import TrainedModel, frozen_copy
from .spectral import (BandPartition, Spectrum, dft_forward, expand_mask, hermitian_parts, inverse_real,
                       make_partition)
from .synthdata import ClusterSet, Epoch, select_target_cluster
from .textio import LoadError, config_hash, read_lines, require, write_lines

log = logging.getLogger(__name__)


class NumericError(ArithmeticError):
    """Optimization produced a non-finite loss."""


@dataclass
class ExplainerConfig:
    lam: float = 0.05
    learning_rate: float = 0.01
    max_epochs: int = 300
    patience: int = 10
    min_relative_improvement: float = 1e-4
    num_bands: int = 10
    regularizers_enabled: bool = True
    one_branch_mode: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        if self.max_epochs < 0 or self.learning_rate <= 0:
            raise ContractError("max_epochs must be >= 0 and learning_rate > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class Mask:
    logits: Tensor

    @classmethod
    def init(cls, n_channels: int, num_bands: int, value: float = 0.0) -> "Mask":
        return cls(Tensor(np.full((n_channels, num_bands), value), requires_grad=True))

    def values(self) -> np.ndarray:
        return dc.sigmoid(Tensor(self.logits.data)).data

    def tensor(self) -> Tensor:
        return dc.sigmoid(self.logits)


@dataclass
class PerturbationGenerator:
    """Per-channel dense maps on the real and imaginary spectrum.

    Two-branch mode keeps separate (T, T) maps for the real and imaginary
    parts. One-branch mode feeds the concatenated [real, imag] row through a
    single (2T, 2T) map and splits the output.
    """

    params: dict[str, Tensor]
    n_bins: int
    one_branch: bool = False

    @classmethod
    def init(cls, n_bins: int, rng: np.random.Generator, one_branch: bool = False) -> "PerturbationGenerator":
        if one_branch:
            width = 2 * n_bins
            bound = 1.0 / np.sqrt(width)
            params = {"w": Tensor(rng.uniform(-bound, bound, (width, width)), requires_grad=True),
                      "b": Tensor(np.zeros(width), requires_grad=True)}
        else:
            bound = 1.0 / np.sqrt(n_bins)
            params = {"w_real": Tensor(rng.uniform(-bound, bound, (n_bins, n_bins)), requires_grad=True),
                      "b_real": Tensor(np.zeros(n_bins), requires_grad=True),
                      "w_imag": Tensor(rng.uniform(-bound, bound, (n_bins, n_bins)), requires_grad=True),
                      "b_imag": Tensor(np.zeros(n_bins), requires_grad=True)}
        return cls(params, n_bins, one_branch)

    @classmethod
    def zeros(cls, n_bins: int, one_branch: bool = False) -> "PerturbationGenerator":
        gen = cls.init(n_bins, np.random.default_rng(0), one_branch)
        for p in gen.params.values():
            p.data[...] = 0.0
        return gen

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, real: np.ndarray, imag: np.ndarray) -> tuple[Tensor, Tensor]:
        if real.shape[-1] != self.n_bins:
            raise ContractError(f"spectrum has {real.shape[-1]} bins, generator expects {self.n_bins}")
        p = self.params
        if self.one_branch:
            joined = Tensor(np.concatenate([real, imag], axis=-1))
            out = joined @ p["w"] + p["b"]
            re, im = dc.split(out, 2, axis=-1)
        else:
            re = Tensor(real) @ p["w_real"] + p["b_real"]
            im = Tensor(imag) @ p["w_imag"] + p["b_imag"]
        return hermitian_parts(re, im)


def generate_perturbation(gen: PerturbationGenerator, spec: Spectrum) -> Spectrum:
    re, im = gen.forward(spec.real, spec.imag)
    return Spectrum(re.data, im.data)


def _blend(spec: Spectrum, m_bins: Tensor, pert_re: Tensor, pert_im: Tensor) -> tuple[Tensor, Tensor]:
    keep_out = 1.0 - m_bins
    return (dc.mul(Tensor(spec.real), m_bins) + keep_out * pert_re,
            dc.mul(Tensor(spec.imag), m_bins) + keep_out * pert_im)


def apply_mask(spec: Spectrum, mask, partition: BandPartition, gen: PerturbationGenerator) -> Spectrum:
    """X * M + (1 - M) * gen(X), with the band mask repeated out to every bin."""
    values = mask.values() if isinstance(mask, Mask) else np.asarray(mask, dtype=np.float64)
    if values.shape[-2:] != (spec.channels, partition.num_bands):
        raise DimensionError(f"mask {values.shape} does not match spectrum channels {spec.channels} "
                             f"x {partition.num_bands} bands")
    m_bins = Tensor(expand_mask(values, partition))
    pr, pi = gen.forward(spec.real, spec.imag)
    re, im = _blend(spec, m_bins, pr, pi)
    return Spectrum(re.data, im.data)


# -- target alignment -----------------------------------------------------
def _stacked(targets) -> Spectrum:
    if isinstance(targets, Spectrum):
        return targets if targets.real.ndim == 3 else Spectrum(targets.real[None], targets.imag[None])
    targets = list(targets)
    if not targets:
        raise ContractError("target cluster is empty")
    return Spectrum(np.stack([t.real for t in targets]), np.stack([t.imag for t in targets]))


def target_alignment_loss(gen_output: Spectrum, target_samples) -> float:
    """Mean over targets of the mean squared complex distance to ``gen_output``."""
    tgt = _stacked(target_samples)
    if tgt.real.shape[0] == 0:
        raise ContractError("target cluster is empty")
    if tgt.real.shape[1:] != gen_output.real.shape:
        raise DimensionError(f"targets {tgt.real.shape[1:]} vs perturbation {gen_output.real.shape}")
    d2 = (gen_output.real - tgt.real) ** 2 + (gen_output.imag - tgt.imag) ** 2
    return float(d2.mean(axis=(1, 2)).mean())


@dataclass(frozen=True)
class TargetStats:
    """Sufficient statistics of a target cluster for the alignment loss.

    mean_i |Y - T_i|^2 = |Y - mean(T)|^2 + (mean_i |T_i|^2 - |mean(T)|^2) per bin, so
    the loss needs only the mean spectrum and a constant spread term.
    """

    mean_real: np.ndarray
    mean_imag: np.ndarray
    spread: float

    @classmethod
    def from_targets(cls, targets) -> "TargetStats":
        tgt = _stacked(targets)
        if tgt.real.shape[0] == 0:
            raise ContractError("target cluster is empty")
        mr, mi = tgt.real.mean(axis=0), tgt.imag.mean(axis=0)
        power = (tgt.real ** 2 + tgt.imag ** 2).mean(axis=0)
        spread = float((power - mr ** 2 - mi ** 2).mean())
        return cls(mr, mi, spread)

    def loss(self, re: Tensor, im: Tensor) -> Tensor:
        dr = re - Tensor(self.mean_real)
        di = im - Tensor(self.mean_imag)
        return dc.mean(dc.square(dr) + dc.square(di)) + self.spread


class ClusterTargets:
    """Caches :class:`TargetStats` per subject of a cluster set."""

    def __init__(self, clusters: ClusterSet):
        self.clusters = clusters
        self._stats: dict[int, TargetStats] = {}

    def select(self, data: np.ndarray) -> int:
        return select_target_cluster(data, self.clusters)

    def stats(self, subject_id: int) -> TargetStats:
        if subject_id not in self._stats:
            self._stats[subject_id] = TargetStats.from_targets(self.clusters.frequency_samples[subject_id])
        return self._stats[subject_id]


# -- objective ------------------------------------------------------------
@dataclass
class _Problem:
    """Everything about one instance that stays fixed during the search."""

    model: TrainedModel
    spec: Spectrum
    target_probs: np.ndarray
    target: TargetStats
    partition: BandPartition
    config: ExplainerConfig


def _prepare(model: TrainedModel, data: np.ndarray, targets: TargetStats, partition: BandPartition,
             config: ExplainerConfig) -> _Problem:
    spec = dft_forward(data)
    probs = dc.softmax(model.logits(data).data, axis=1)
    return _Problem(model, spec, probs, targets, partition, config)


def _objective(prob: _Problem, mask_t: Tensor, gen: PerturbationGenerator):
    cfg = prob.config
    pr, pi = gen.forward(prob.spec.real, prob.spec.imag)
    m_bins = expand_mask(mask_t, prob.partition)
    re, im = _blend(prob.spec, m_bins, pr, pi)
    x_hat = inverse_real(re, im)
    logits = prob.model.logits(x_hat)
    ce = dc.cross_entropy(logits, prob.target_probs)
    total = ce
    comps = {"prediction": float(ce.data), "mask_l1": 0.0, "perturbation_l1": 0.0, "alignment": 0.0}
    if cfg.regularizers_enabled:
        mask_l1 = dc.l1_mean(mask_t)
        pert_l1 = dc.mean(dc.complex_abs(pr, pi))
        total = total + mask_l1 + pert_l1
        comps["mask_l1"] = float(mask_l1.data)
        comps["perturbation_l1"] = float(pert_l1.data)
    if cfg.lam > 0:
        align = prob.target.loss(pr, pi)
        total = total + cfg.lam * align
        comps["alignment"] = float(align.data)
    comps["total"] = float(total.data)
    return total, comps, x_hat


def total_objective(model: TrainedModel, epoch, mask, gen: PerturbationGenerator, clusters: ClusterSet,
                    config: ExplainerConfig, partition: BandPartition | None = None) -> tuple[float, dict]:
    """Objective value and its individual components for one epoch.

    The alignment component is reported unweighted; ``total`` applies lambda.
    With ``lam == 0`` the alignment term is skipped entirely.
    """
    data = epoch.data if isinstance(epoch, Epoch) else np.asarray(epoch, dtype=np.float64)
    partition = partition or make_partition(data.shape[-1], config.num_bands)
    frozen = frozen_copy(model)
    if config.lam > 0:
        sid = select_target_cluster(data, clusters)
        stats = TargetStats.from_targets(clusters.frequency_samples[sid])
    else:
        stats = TargetStats(np.zeros(data.shape), np.zeros(data.shape), 0.0)
    prob = _prepare(frozen, data, stats, partition, config)
    logits = mask.logits if isinstance(mask, Mask) else _logit(np.asarray(mask, dtype=np.float64))
    _, comps, _ = _objective(prob, dc.sigmoid(Tensor(logits.data if isinstance(logits, Tensor) else logits)), gen)
    return comps["total"], comps


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-300, 1 - 1e-16)
    return np.log(p) - np.log1p(-p)


# -- results --------------------------------------------------------------
@dataclass
class SaliencyMap:
    mask_values: np.ndarray  # (Ch, B)
    level: str = "instance"
    epoch_ids: list[int] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mask_values = np.asarray(self.mask_values, dtype=np.float64)
        if self.level not in ("instance", "group"):
            raise ContractError(f"level must be 'instance' or 'group', got {self.level!r}")


@dataclass
class Explanation:
    saliency: SaliencyMap
    generator: PerturbationGenerator
    trace: list[dict]
    target_subject: int | None
    perturbed: np.ndarray  # x_hat in the time domain at the final parameters
    stopped_early: bool

    @property
    def losses(self) -> np.ndarray:
        return np.array([t["total"] for t in self.trace])


def instance_rng(seed: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def optimize_mask(model: TrainedModel, epoch, clusters: ClusterSet | ClusterTargets | None,
                  config: ExplainerConfig | None = None, seed: int = 0, index: int = 0,
                  partition: BandPartition | None = None, epoch_id: int | None = None) -> Explanation:
    """Jointly fit mask logits and a fresh generator for one epoch with Adam.

    Stops after ``max_epochs`` or once the best loss has not improved by a
    relative ``min_relative_improvement`` for ``patience`` consecutive epochs.
    """
    config = config or ExplainerConfig()
    data = epoch.data if isinstance(epoch, Epoch) else np.asarray(epoch, dtype=np.float64)
    if data.ndim != 2:
        raise DimensionError(f"expected a (Ch, T) epoch, got {data.shape}")
    Ch, T = data.shape
    partition = partition or make_partition(T, config.num_bands)
    frozen = frozen_copy(model)

    target_sid = None
    if config.lam > 0:
        if clusters is None:
            raise ContractError("a cluster set is required when lambda > 0")
        targets = clusters if isinstance(clusters, ClusterTargets) else ClusterTargets(clusters)
        target_sid = targets.select(data)
        stats = targets.stats(target_sid)
    else:
        stats = TargetStats(np.zeros((Ch, T)), np.zeros((Ch, T)), 0.0)
    prob = _prepare(frozen, data, stats, partition, config)

    rng = instance_rng(seed, index)
    mask = Mask.init(Ch, config.num_bands)
    gen = PerturbationGenerator.init(T, rng, one_branch=config.one_branch_mode)
    opt = dc.Adam([mask.logits] + gen.parameters(), lr=config.learning_rate)

    trace: list[dict] = []
    best = np.inf
    stale = 0
    stopped_early = False
    for it in range(config.max_epochs):
        opt.zero_grad()
        total, comps, _ = _objective(prob, dc.sigmoid(mask.logits), gen)
        if not np.isfinite(comps["total"]):
            raise NumericError(f"non-finite loss at epoch {it}: {comps}")
        total.backward()
        opt.step()
        comps["epoch"] = it
        trace.append(comps)
        loss = comps["total"]
        if not np.isfinite(best) or loss < best - abs(best) * config.min_relative_improvement:
            best = loss
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                stopped_early = True
                break

    _, final_comps, x_hat = _objective(prob, dc.sigmoid(Tensor(mask.logits.data)), _detached(gen))
    meta = {"seed": seed, "index": index, "config_hash": config.hash(), "epochs_run": len(trace),
            "target_subject": target_sid, "final_loss": final_comps["total"]}
    sal = SaliencyMap(mask.values(), "instance", [epoch_id if epoch_id is not None else index], meta)
    return Explanation(sal, gen, trace, target_sid, x_hat.data.copy(), stopped_early)


def _detached(gen: PerturbationGenerator) -> PerturbationGenerator:
    return PerturbationGenerator({k: Tensor(v.data) for k, v in gen.params.items()}, gen.n_bins, gen.one_branch)


def explain_epochs(model: TrainedModel, epochs: Sequence, clusters: ClusterSet | None,
                   config: ExplainerConfig | None = None, seed: int = 0,
                   progress: bool = False) -> list[Explanation]:
    """Run :func:`optimize_mask` over a list of epochs; instance ``i`` uses seed stream (seed, i)."""
    config = config or ExplainerConfig()
    if not len(epochs):
        raise ContractError("no epochs to explain")
    T = (epochs[0].data if isinstance(epochs[0], Epoch) else np.asarray(epochs[0])).shape[-1]
    partition = make_partition(T, config.num_bands)
    targets = ClusterTargets(clusters) if clusters is not None else None
    out = []
    for i, ep in enumerate(epochs):
        out.append(optimize_mask(model, ep, targets, config, seed=seed, index=i, partition=partition, epoch_id=i))
        if progress and (i + 1) % 10 == 0:
            log.info("explained %d/%d epochs", i + 1, len(epochs))
    return out


def group_saliency(instance_maps: Sequence) -> SaliencyMap:
    """Elementwise mean of instance maps."""
    maps = [m.mask_values if isinstance(m, SaliencyMap) else np.asarray(m, dtype=np.float64) for m in instance_maps]
    if not maps:
        raise ContractError("cannot average an empty set of maps")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise DimensionError("instance maps differ in shape")
    ids: list[int] = []
    for m in instance_maps:
        if isinstance(m, SaliencyMap):
            ids.extend(m.epoch_ids)
    return SaliencyMap(np.mean(np.stack(maps), axis=0), "group", ids, {"n_instances": len(maps)})


# -- persistence ------------------------------------------------------------
def save_saliency(path, sal: SaliencyMap) -> None:
    rec = {"record": "saliency_map", "level": sal.level, "shape": list(sal.mask_values.shape),
           "epoch_ids": list(sal.epoch_ids), "meta": sal.meta, "values": sal.mask_values}
    write_lines(path, [rec])


def load_saliency(path) -> SaliencyMap:
    path = Path(path)
    recs = [r for r in read_lines(path) if r.get("record") == "saliency_map"]
    if not recs:
        raise LoadError(path, "no saliency_map record")
    rec = recs[0]
    try:
        vals = np.array(require(rec, "values", path), dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise LoadError(path, "field 'values' is not a numeric grid") from exc
    if vals.ndim != 2:
        raise LoadError(path, f"field 'values' must be a Ch x B grid, got {vals.ndim}-D")
    if not np.all(np.isfinite(vals)) or vals.min() < 0 or vals.max() > 1:
        raise LoadError(path, "field 'values' must lie in [0, 1]")
    level = require(rec, "level", path)
    try:
        return SaliencyMap(vals, level, list(rec.get("epoch_ids", [])), dict(rec.get("meta", {})))
    except ContractError as exc:
        raise LoadError(path, f"field 'level': {exc}") from exc


def save_trace(path, exp: Explanation) -> None:
    def records():
        yield {"record": "trace_meta", **exp.saliency.meta}
        for row in exp.trace:
            yield {"record": "trace", **row}

    write_lines(path, records())


def write_traces(path, exps: Sequence[Explanation]) -> None:
    """All loss traces of a run in one file, tagged by epoch id."""
    def records():
        for e in exps:
            eid = e.saliency.epoch_ids[0] if e.saliency.epoch_ids else None
            yield {"record": "trace_meta", "epoch_id": eid, **e.saliency.meta}
            for row in e.trace:
                yield {"record": "trace", "epoch_id": eid, **row}

    write_lines(path, records())
