"""Numerical laboratory for mean field games with reflecting (Neumann) boundaries.

Solves the N-player Nash system, the mean field game system and the
trajectory-defined master equation on a 1-D interval, and measures how the
finite-player quantities approach their mean field limits.
"""

from reflected_mfg.grid import Grid1D, GridMeasure, TimeGrid, build_grid, wasserstein1
from reflected_mfg.model import Model, ModelConfig

__all__ = [
    "Grid1D",
    "GridMeasure",
    "TimeGrid",
    "Model",
    "ModelConfig",
    "build_grid",
    "wasserstein1",
]

__version__ = "0.1.0"
