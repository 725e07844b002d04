"""Numerical KAM engine for finitely differentiable nearly integrable Hamiltonians."""

__version__ = "0.1.0"
