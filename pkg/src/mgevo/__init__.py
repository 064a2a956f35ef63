"""Grammar-guided evolution of multigrid preconditioners for the 2D Helmholtz equation."""

__version__ = "0.1.0"
