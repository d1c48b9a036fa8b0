"""Optimal control of volume-constrained Allen-Cahn phase fields.

Forward BDF2 time stepping with an FAS multigrid solver and a secant
iteration for the volume multiplier, a backward linear adjoint solved on a
coarser storage grid, steepest descent with an adaptive step size, and
block-structured adaptive refinement for the forward solve.
"""

from .mesh import GridHierarchy, ScalarField, UniformGrid, integrate

__all__ = ["GridHierarchy", "ScalarField", "UniformGrid", "integrate"]
__version__ = "0.1.0"
