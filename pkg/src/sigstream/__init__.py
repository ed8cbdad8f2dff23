"""Signature-based networks for classifying points in longitudinal streams."""

from . import autodiff, nn
from ._accel import backend
from .errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    DivergenceError,
    DomainError,
    LoadError,
    ShapeError,
    SigStreamError,
)
from .models import AggregatorConfig, HeadConfig, InputDims, ModelConfig, UnitConfig, build_model
from .signature import (
    LyndonBasis,
    SignatureSpec,
    TruncatedTensor,
    expanding_signatures,
    log_signature,
    logsig_channels,
    sig_channels,
    signature,
)
from .train import GridSpec, TrainSpec, classification_metrics, grid_search, train_model

__version__ = "0.1.0"

__all__ = [
    "AggregatorConfig",
    "ConfigError",
    "ContractError",
    "DegenerateInputError",
    "DivergenceError",
    "DomainError",
    "GridSpec",
    "HeadConfig",
    "InputDims",
    "LoadError",
    "LyndonBasis",
    "ModelConfig",
    "ShapeError",
    "SigStreamError",
    "SignatureSpec",
    "TrainSpec",
    "TruncatedTensor",
    "UnitConfig",
    "autodiff",
    "backend",
    "build_model",
    "classification_metrics",
    "expanding_signatures",
    "grid_search",
    "log_signature",
    "logsig_channels",
    "nn",
    "sig_channels",
    "signature",
    "train_model",
]
