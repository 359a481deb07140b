"""Stochastic MPC with a discounted chance constraint on an infinite horizon."""

__version__ = "0.1.0"
