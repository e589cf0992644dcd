"""Dimension-wise derivatives with HollowNets, and the solvers and models built on them."""

__version__ = "0.1.0"
