"""Jamming detection for grant-free uplinks via sparsity-constrained factor analysis."""

__version__ = "0.1.0"
