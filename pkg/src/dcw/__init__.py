"""Dissipative Curie-Weiss model: particle system, macroscopic limit and Fokker-Planck solver."""
from .model import (DomainError, ModelParams, NoConvergenceError, NumericalError, Stability,
                    classify_origin, flip_rate, interaction_potential, lienard_g,
                    linearization_eigenvalues)

__version__ = "0.1.0"

__all__ = [
    "DomainError", "ModelParams", "NoConvergenceError", "NumericalError", "Stability",
    "classify_origin", "flip_rate", "interaction_potential", "lienard_g", "linearization_eigenvalues",
]
