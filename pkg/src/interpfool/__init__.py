"""Testbench for adversarial manipulation of saliency-map explanations."""

__version__ = "0.1.0"
