"""Two-layer networks after one gradient step on Gaussian-mixture data, and their Hermite polynomial equivalents."""

from .activations import IDENTITY, RELU, SIGMOID, TANH, Activation, get_activation, polynomial
from .errors import ConfigError, NumericalError
from .hermite import HermiteActivation, build_equivalent_activation, hermite_coefficients, hermite_eval

__all__ = [
    "Activation",
    "ConfigError",
    "HermiteActivation",
    "IDENTITY",
    "NumericalError",
    "RELU",
    "SIGMOID",
    "TANH",
    "build_equivalent_activation",
    "get_activation",
    "hermite_coefficients",
    "hermite_eval",
    "polynomial",
]

__version__ = "0.1.0"
