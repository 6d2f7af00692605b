"""Multi-modal temporal disentanglement: dependent-latent data generation,
variational training with flow-based priors, and identifiability evaluation."""

__version__ = "0.1.0"

from .synthgen import GenerationSpec, generate_dataset, sample_latent_process
from .trainer import ExperimentConfig, MateModel, resume, train, train_model

__all__ = [
    "GenerationSpec",
    "generate_dataset",
    "sample_latent_process",
    "ExperimentConfig",
    "MateModel",
    "train",
    "train_model",
    "resume",
    "__version__",
]
