"""Semi-supervised multi-view VAE with a mixture-of-Gaussians posterior over a shared latent code."""

from .data import (
    MultiViewBatch,
    MultiViewDataset,
    SynthConfig,
    ViewSpec,
    load_csv_views,
    make_synthetic,
    mask_labels,
    minibatch_iter,
    standardize,
)
from .distributions import DiagGaussian, SeededRng
from .model import MixturePosterior, ModelConfig, SemiMvaeModel, init_model, load_model, save_model
from .objective import (
    BoundBreakdown,
    ObjectiveConfig,
    batch_objective,
    entropy_lower_bound,
    finite_difference_gradient,
    labeled_bound,
    unlabeled_bound,
)
from .optim import AdamState, adam_step, sgd_step
from .trainer import TrainConfig, TrainHistory, evaluate, fit, run_experiment, train

__all__ = [
    "AdamState",
    "BoundBreakdown",
    "DiagGaussian",
    "MixturePosterior",
    "ModelConfig",
    "MultiViewBatch",
    "MultiViewDataset",
    "ObjectiveConfig",
    "SeededRng",
    "SemiMvaeModel",
    "SynthConfig",
    "TrainConfig",
    "TrainHistory",
    "ViewSpec",
    "adam_step",
    "batch_objective",
    "entropy_lower_bound",
    "evaluate",
    "finite_difference_gradient",
    "fit",
    "init_model",
    "labeled_bound",
    "load_csv_views",
    "load_model",
    "make_synthetic",
    "mask_labels",
    "minibatch_iter",
    "run_experiment",
    "save_model",
    "sgd_step",
    "standardize",
    "train",
    "unlabeled_bound",
]
