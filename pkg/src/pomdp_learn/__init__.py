"""Learn finite POMDP models from continuous time series and check PAC-style value bounds."""

from .core import (GaussianEmission, ModelParseError, ModelValidationError, PolicyTree,
                   PomdpModel, TimeSeries, alpha_distance, deserialize_model, serialize_model,
                   validate_model)

__version__ = "0.1.0"

__all__ = [
    "GaussianEmission",
    "ModelParseError",
    "ModelValidationError",
    "PolicyTree",
    "PomdpModel",
    "TimeSeries",
    "alpha_distance",
    "deserialize_model",
    "serialize_model",
    "validate_model",
    "__version__",
]
