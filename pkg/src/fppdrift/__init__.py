"""Drift estimation for Ito SDEs from snapshot data via a weak-form Wasserstein loss."""

__version__ = "0.1.0"
