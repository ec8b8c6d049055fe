"""Poincare inequality constants for Langevin dynamics near optimal manifolds."""
from . import constants, langevin, manifold, potential, spectral
from .potential import get_potential
from .manifold import get_manifold

__version__ = "0.1.0"
