import numpy as np
import pytest

from freqmask.models import ModelConfig, TrainHyperparams, build_model, train_model
from freqmask.synthdata import SynthConfig, generate_dataset


def numeric_grad(fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn`` at ``x`` (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = fn()
        flat[i] = old - eps
        lo = fn()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


@pytest.fixture(scope="session")
def small_data():
    """3 subjects x 12 epochs per class, 4 channels, 1 s at 64 Hz."""
    cfg = SynthConfig(n_channels=4, sample_rate=64.0, epoch_seconds=1.0, num_bands=4, class_gap=0.5)
    epochs, truth = generate_dataset(11, n_subjects=3, epochs_per_subject_per_class=12, config=cfg)
    return epochs, truth, cfg


@pytest.fixture(scope="session")
def small_model(small_data):
    epochs, _, cfg = small_data
    model = build_model(ModelConfig(n_channels=cfg.n_channels, n_samples=cfg.n_samples, kernel_size=8, seed=1))
    return train_model(model, epochs, TrainHyperparams(learning_rate=0.01, epochs=60))


@pytest.fixture(scope="session")
def default_setup():
    """Default synthetic dataset with a mini_cnn trained on the default hyperparameters."""
    from freqmask.synthdata import compute_clusters

    epochs, truth = generate_dataset(0)
    model = train_model(build_model(ModelConfig()), epochs, TrainHyperparams())
    return epochs, truth, model, compute_clusters(epochs)
