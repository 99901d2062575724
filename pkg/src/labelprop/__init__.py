"""Graph-based semi-supervised label propagation with a desk-scale trainer."""

from . import align, augment, backbone, data, graph, io, metrics, trainer
from .errors import (
    ConfigError,
    FormatError,
    InconsistencyError,
    InputError,
    LabelPropError,
    NumericalError,
)

__version__ = "0.1.0"

__all__ = [
    "align",
    "augment",
    "backbone",
    "data",
    "graph",
    "io",
    "metrics",
    "trainer",
    "ConfigError",
    "FormatError",
    "InconsistencyError",
    "InputError",
    "LabelPropError",
    "NumericalError",
    "__version__",
]
