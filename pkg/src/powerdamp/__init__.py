"""Power-based oscillation compensation with online estimation of biased harmonics."""

__version__ = "0.1.0"
