"""Learned frequency-domain perturbation masks for explaining time-series classifiers."""
from .diffcore import ContractError, DimensionError, Tensor
from .evaluate import (RemovalReport, easy_peasi, generator_flops, kde_discrepancy, lambda_sweep, loso_study,
                       removal_feed_in, removal_feed_in_instance, threshold_split)
from .explainer import ExplainerConfig, NumericError, SaliencyMap, explain_epochs, group_saliency, optimize_mask
from .models import ModelConfig, TrainHyperparams, build_model, predict, train_model
from .spectral import dft_forward, dft_inverse, make_partition
from .synthdata import SynthConfig, compute_clusters, generate_dataset

__version__ = "0.1.0"
