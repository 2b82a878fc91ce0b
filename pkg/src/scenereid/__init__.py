"""Scene-robust person search head with a synthetic benchmark harness."""

__version__ = "0.1.0"
