"""Branching random walks in a random environment in time.

Modules: :mod:`~brwre.env` (environments), :mod:`~brwre.model` (reproduction
laws), :mod:`~brwre.sim` (simulation and martingales), :mod:`~brwre.ratefn`
(rate function, Legendre transform, convergence regions), :mod:`~brwre.dev`
(large and moderate deviations) and :mod:`~brwre.cli`.
"""

__version__ = "0.1.0"

from .env import EnvironmentPath, EnvironmentSpec, mixing_bound, sample_path, stationary_distribution
from .model import (ReproductionLaw, binary_model, categorical_model, gaussian_model, log_mgf,
                    truncate)
from .ratefn import RateFunction, legendre
from .regions import Ball, Box, Union
from .sim import laplace, run_generations

__all__ = [
    "Ball", "Box", "EnvironmentPath", "EnvironmentSpec", "RateFunction", "ReproductionLaw", "Union",
    "binary_model", "categorical_model", "gaussian_model", "laplace", "legendre", "log_mgf",
    "mixing_bound", "run_generations", "sample_path", "stationary_distribution", "truncate",
]
