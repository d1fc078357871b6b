"""Equilibrium strategies for time-inconsistent control with recursive (Volterra) costs."""

__version__ = "0.1.0"
