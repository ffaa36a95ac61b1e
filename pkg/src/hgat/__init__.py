"""Heterogeneous graph attention forecasting for coupled electrical and hydraulic telemetry.

The package is a small numpy stack: a tape-based autodiff core, a typed
graph, data preparation, a synthetic plant simulator, the HGAT model with its
baselines, training utilities and a command line front end (``hgat``).
"""
from .errors import ConfigError, NumericalError, UserError

__version__ = "0.1.0"

__all__ = ["ConfigError", "NumericalError", "UserError", "__version__"]
