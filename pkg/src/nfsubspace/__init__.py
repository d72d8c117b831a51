"""Near-field source localization with classical and learned subspace methods.

Modules, bottom up:

``array_signal``   geometry, steering models, snapshot simulation, datasets
``subspace``       covariances, eigen-analysis, model-order rules, spatial smoothing
``classical``      2D MUSIC, ESPRIT, 1D range MUSIC, beampatterns
``autodiff``       differentiable EVD, activations, gradient checks, checkpoints
``models``         autoencoder producing a surrogate covariance
``losses``         training losses, RMSPE and Maskpeak
``localizers``     NF-SubspaceNet and DCD-MUSIC inference and training
``harness``        experiment configs, evaluation, reports; ``cli`` wraps it
"""

from .array_signal import (ArrayGeometry, Coherence, DatasetConfig, SourceScene,
                           SteeringModel, fresnel_region, generate_dataset, simulate_snapshots,
                           steering_matrix)
from .classical import SearchGrid, esprit_doa, localize_2d_music, music_spectrum_2d
from .localizers import (TrainConfig, dcd_infer, nf_subspacenet_infer, train_dcd,
                         train_nf_subspacenet)
from .models import AutoencoderConfig
from .subspace import AIC, MDL, ModelOrderCriterion

__version__ = "0.1.0"

__all__ = [
    "AIC", "MDL", "ArrayGeometry", "AutoencoderConfig", "Coherence", "DatasetConfig",
    "ModelOrderCriterion", "SearchGrid", "SourceScene", "SteeringModel", "TrainConfig",
    "dcd_infer", "esprit_doa", "fresnel_region", "generate_dataset", "localize_2d_music",
    "music_spectrum_2d", "nf_subspacenet_infer", "simulate_snapshots", "steering_matrix",
    "train_dcd", "train_nf_subspacenet",
]
