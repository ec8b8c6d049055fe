"""Discretized eigenvalue problems: Neumann Laplacian, Langevin generator, Laplace-Beltrami."""
from .eigen import *  # noqa: F401,F403
from .grid import *  # noqa: F401,F403
from .operators import *  # noqa: F401,F403
from .problems import *  # noqa: F401,F403
