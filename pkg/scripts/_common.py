"""Shared setup for the experiment scripts: default dataset, trained model, balanced instance selection."""
import argparse
from pathlib import Path

import numpy as np

from freqmask.models import ModelConfig, TrainHyperparams, build_model, load_model, save_model, train_model
from freqmask.synthdata import compute_clusters, generate_dataset


def base_parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=40, help="explained instances (balanced across classes)")
    p.add_argument("--model", type=Path, default=None, help="checkpoint to reuse; trained and saved here if missing")
    return p


def setup(seed: int, model_path: Path | None):
    epochs, truth = generate_dataset(seed)
    if model_path is not None and model_path.exists():
        model = load_model(model_path)
    else:
        model = train_model(build_model(ModelConfig()), epochs, TrainHyperparams())
        if model_path is not None:
            save_model(model_path, model)
    return epochs, truth, model, compute_clusters(epochs)


def balanced_subset(epochs, n: int, seed: int):
    rng = np.random.default_rng(seed)
    labels = np.array([e.label for e in epochs])
    picks = [rng.choice(np.flatnonzero(labels == c), n // 2, replace=False) for c in (0, 1)]
    return [epochs[int(i)] for pair in zip(*picks) for i in pair]
