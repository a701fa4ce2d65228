from .backbones import (
    REGISTRY,
    BackboneSpec,
    InputTooSmallError,
    UnknownBackboneError,
    WeightsUnavailableError,
    study_backbones,
)
from .network import FusionModel, HeadConfig, build_model
from .training import (
    FeatureCache,
    GradCheck,
    Prediction,
    TrainConfig,
    TrainHistory,
    TrainingDivergedError,
    argmax_labels,
    gradient_check,
    load_checkpoint,
    predict,
    sample_tensors,
    save_checkpoint,
    train,
)

__all__ = [
    "REGISTRY",
    "BackboneSpec",
    "FeatureCache",
    "FusionModel",
    "GradCheck",
    "HeadConfig",
    "InputTooSmallError",
    "Prediction",
    "TrainConfig",
    "TrainHistory",
    "TrainingDivergedError",
    "UnknownBackboneError",
    "WeightsUnavailableError",
    "argmax_labels",
    "build_model",
    "gradient_check",
    "load_checkpoint",
    "study_backbones",
    "predict",
    "sample_tensors",
    "save_checkpoint",
    "train",
]
