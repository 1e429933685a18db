"""Equivariant regularization by denoising (ERED).

Stochastic gradient restoration driven by denoisers averaged over
transformation groups, with an analytic Gaussian-mixture oracle for
checking convergence behaviour on small problems.
"""

__version__ = "0.1.0"
