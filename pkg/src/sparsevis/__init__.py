"""Pruning sweeps over small vision models with interpretability, object
discovery and distortion-robustness evaluation."""

__version__ = "0.1.0"
