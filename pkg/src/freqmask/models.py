"""End-to-end classifiers over raw (Ch, T) epochs, built on the autodiff core.

Two scales are provided: ``mlp`` (flatten -> dense -> relu -> dense) and
``mini_cnn`` (shared temporal filter bank -> relu -> time average ->
channel-mixing dense -> relu -> dense).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, Tensor
from .textio import LoadError, read_lines, require, write_lines

ARCHITECTURES = ("mini_cnn", "mlp")


@dataclass
class ModelConfig:
    architecture: str = "mini_cnn"
    n_channels: int = 8
    n_samples: int = 400
    num_classes: int = 2
    kernel_size: int = 16
    n_filters: int = 4
    hidden: int = 16
    mlp_hidden: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ContractError(f"unknown architecture {self.architecture!r}; choose from {ARCHITECTURES}")
        sizes = (self.n_channels, self.n_samples, self.kernel_size, self.n_filters, self.hidden, self.mlp_hidden)
        if min(sizes) < 1:
            raise ContractError("all model sizes must be positive")
        if self.num_classes != 2:
            raise ContractError("only binary classification is supported")
        if self.kernel_size > self.n_samples:
            raise ContractError("kernel_size exceeds epoch length")


@dataclass
class TrainHyperparams:
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int | None = None  # None -> full batch
    seed: int = 0


@dataclass
class TrainedModel:
    config: ModelConfig
    params: dict[str, Tensor]
    metadata: dict = field(default_factory=dict)

    def logits(self, x) -> Tensor:
        """Forward pass on (N, Ch, T) or (Ch, T) input; always returns (N, 2) logits."""
        x = dc.as_tensor(x)
        if x.ndim == 2:
            x = dc.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1:] != (self.config.n_channels, self.config.n_samples):
            raise ContractError(
                f"expected input (N, {self.config.n_channels}, {self.config.n_samples}), got {x.shape}")
        return _FORWARD[self.config.architecture](self.params, x)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def build_model(config: ModelConfig) -> TrainedModel:
    config.validate()
    rng = np.random.default_rng(config.seed)
    Ch, T = config.n_channels, config.n_samples
    if config.architecture == "mlp":
        fan = Ch * T
        params = {
            "w1": _uniform(rng, fan, (fan, config.mlp_hidden)),
            "b1": _uniform(rng, fan, (config.mlp_hidden,)),
            "w2": _uniform(rng, config.mlp_hidden, (config.mlp_hidden, config.num_classes)),
            "b2": _uniform(rng, config.mlp_hidden, (config.num_classes,)),
        }
    else:
        K, F, H = config.kernel_size, config.n_filters, config.hidden
        params = {
            "conv_w": _uniform(rng, K, (F, K)),
            "conv_b": _uniform(rng, K, (F, 1)),
            "w1": _uniform(rng, Ch * F, (Ch * F, H)),
            "b1": _uniform(rng, Ch * F, (H,)),
            "w2": _uniform(rng, H, (H, config.num_classes)),
            "b2": _uniform(rng, H, (config.num_classes,)),
        }
    return TrainedModel(config, params, {"epochs_run": 0})


def mini_cnn_parameter_count(config: ModelConfig) -> int:
    K, F, H, C = config.kernel_size, config.n_filters, config.hidden, config.num_classes
    return F * K + F + config.n_channels * F * H + H + H * C + C


def _mlp_forward(p, x: Tensor) -> Tensor:
    n = x.shape[0]
    h = dc.reshape(x, (n, -1))
    h = dc.relu(h @ p["w1"] + p["b1"])
    return h @ p["w2"] + p["b2"]


def _cnn_forward(p, x: Tensor) -> Tensor:
    n = x.shape[0]
    h = dc.conv1d(x, p["conv_w"])  # (N, Ch, F, L)
    h = dc.relu(h + p["conv_b"])
    h = dc.mean(h, axis=-1)  # (N, Ch, F)
    h = dc.reshape(h, (n, -1))
    h = dc.relu(h @ p["w1"] + p["b1"])
    return h @ p["w2"] + p["b2"]


_FORWARD: dict[str, Callable[[dict, Tensor], Tensor]] = {"mlp": _mlp_forward, "mini_cnn": _cnn_forward}


def _as_arrays(epochs):
    if isinstance(epochs, np.ndarray):
        return epochs, None
    X = np.stack([e.data for e in epochs])
    y = np.array([e.label for e in epochs], dtype=int)
    return X, y


def predict(model: TrainedModel, epochs) -> tuple[np.ndarray, np.ndarray]:
    """Softmax scores (N, 2) and labels (argmax, ties to class 0)."""
    X, _ = _as_arrays(epochs)
    if X.ndim == 2:
        X = X[None]
    z = model.logits(X).data
    scores = dc.softmax(z, axis=1)
    labels = np.argmax(z, axis=1)  # first maximum wins -> ties go to class 0
    return scores, labels


def accuracy(model: TrainedModel, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(model, X)[1] == y))


def train_model(model: TrainedModel, train_epochs, hyper: TrainHyperparams | None = None,
                test_epochs=None) -> TrainedModel:
    """Cross-entropy training against hard labels with Adam (mutates and returns ``model``)."""
    hyper = hyper or TrainHyperparams()
    X, y = _as_arrays(train_epochs)
    if len(X) == 0:
        raise ContractError("empty training set")
    if len(np.unique(y)) < 2:
        raise ContractError("training set contains a single class")
    onehot = np.eye(model.config.num_classes)[y]
    params = list(model.params.values())
    opt = dc.Adam(params, lr=hyper.learning_rate)
    rng = np.random.default_rng(hyper.seed)
    n = len(X)
    bs = n if not hyper.batch_size else min(hyper.batch_size, n)
    losses = []
    for _ in range(hyper.epochs):
        order = np.arange(n) if bs == n else rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            opt.zero_grad()
            loss = dc.cross_entropy(model.logits(X[idx]), onehot[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / n)
    for p in params:
        p.grad = None
    meta = dict(model.metadata)
    meta["epochs_run"] = meta.get("epochs_run", 0) + hyper.epochs
    meta["train_accuracy"] = accuracy(model, X, y)
    if losses:
        meta["final_loss"] = losses[-1]
    if test_epochs is not None and len(test_epochs):
        Xt, yt = _as_arrays(test_epochs)
        meta["test_accuracy"] = accuracy(model, Xt, yt)
    model.metadata = meta
    return model


def input_gradient(model: TrainedModel, epoch, objective: Callable[[Tensor], Tensor]) -> np.ndarray:
    """d objective(logits) / d input for one (Ch, T) epoch."""
    data = epoch.data if hasattr(epoch, "data") and not isinstance(epoch, np.ndarray) else np.asarray(epoch)
    x = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
    frozen = [p.requires_grad for p in model.params.values()]
    for p in model.params.values():
        p.requires_grad = False
    try:
        out = objective(model.logits(x))
        if out.size != 1:
            raise ContractError(f"objective must be scalar, got shape {out.shape}")
        out.backward()
    finally:
        for p, rg in zip(model.params.values(), frozen):
            p.requires_grad = rg
    return x.grad


def frozen_copy(model: TrainedModel) -> TrainedModel:
    """Same weights with gradient tracking off (for use as a fixed black box)."""
    params = {k: Tensor(v.data.copy()) for k, v in model.params.items()}
    return TrainedModel(model.config, params, dict(model.metadata))


# -- checkpoints --------------------------------------------------------
def save_model(path, model: TrainedModel) -> None:
    def records():
        yield {"record": "config", **asdict(model.config)}
        yield {"record": "metadata", **model.metadata}
        for name, t in model.params.items():
            yield {"record": "param", "name": name, "shape": list(t.shape), "values": t.data.ravel()}

    write_lines(path, records())


def load_model(path) -> TrainedModel:
    path = Path(path)
    config, meta, params = None, {}, {}
    for i, rec in enumerate(read_lines(path), 1):
        kind = require(rec, "record", path, i)
        if kind == "config":
            fields = {k: v for k, v in rec.items() if k != "record"}
            try:
                config = ModelConfig(**fields)
                config.validate()
            except (TypeError, ContractError) as exc:
                raise LoadError(path, f"record {i}: bad config ({exc})") from exc
        elif kind == "metadata":
            meta = {k: v for k, v in rec.items() if k != "record"}
        elif kind == "param":
            name = require(rec, "name", path, i)
            shape = tuple(require(rec, "shape", path, i))
            try:
                vals = np.array(require(rec, "values", path, i), dtype=np.float64)
                arr = vals.reshape(shape)
            except (TypeError, ValueError) as exc:
                raise LoadError(path, f"record {i}: field 'values' does not match shape {shape}") from exc
            params[name] = Tensor(arr, requires_grad=True)
        else:
            raise LoadError(path, f"record {i}: unknown record type {kind!r}")
    if config is None:
        raise LoadError(path, "missing config record")
    expected = build_model(config).params
    for name, t in expected.items():
        if name not in params:
            raise LoadError(path, f"missing parameter '{name}'")
        if params[name].shape != t.shape:
            raise LoadError(path, f"parameter '{name}' has shape {params[name].shape}, expected {t.shape}")
    return TrainedModel(config, {k: params[k] for k in expected}, meta)
