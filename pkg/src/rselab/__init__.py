"""rselab: a desk-scale adversarial-robustness laboratory.

Noise-layer convnets trained with noisy SGD and evaluated by ensembling over
noise draws, the white-box attacks needed to probe them (FGSM family, PGD,
C&W-L2 with expectation-over-noise gradients), baseline defenses, and
numerical checks of the underlying bounds.
"""

__version__ = "0.1.0"

from .attacks import AttackConfig, AttackResult, run_attack
from .data import Dataset, gen_synthetic, load_cifar10
from .defense import (EnsembleConfig, TrainConfig, desk_config,
                      ensemble_probs, predict_ensemble, train)
from .errors import (ConfigurationError, FormatError, NumericError,
                     RselabError, UsageError)
from .estimator import RSEClassifier
from .layers import Model, ModelConfig, build_model, forward
from .rng import RngStream

__all__ = [
    "AttackConfig", "AttackResult", "ConfigurationError", "Dataset",
    "EnsembleConfig", "FormatError", "Model", "ModelConfig", "NumericError",
    "RSEClassifier", "RngStream", "RselabError", "TrainConfig", "UsageError",
    "build_model", "desk_config", "ensemble_probs", "forward",
    "gen_synthetic", "load_cifar10", "predict_ensemble", "run_attack",
    "train", "__version__",
]
