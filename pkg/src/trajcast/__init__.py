"""Map-free multi-agent trajectory forecasting with factorized attention."""

__version__ = "0.1.0"
