"""Hardware-aware tensor-decomposition search toolkit."""

__version__ = "0.1.0"
