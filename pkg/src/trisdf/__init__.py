"""Multi-scale tri-plane SDF reconstruction with cone-filtered features."""

__version__ = "0.1.0"
