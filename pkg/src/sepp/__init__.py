"""Simulation and analysis of counting processes whose intensity depends on
the running average (N_t + gamma) / (t + 1)."""

__version__ = "0.1.0"

from .rate_fn import RateFunction, classify_growth, find_fixed_points  # noqa: E402

__all__ = ["RateFunction", "classify_growth", "find_fixed_points", "__version__"]
