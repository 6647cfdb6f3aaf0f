"""Interchange-transfer knowledge distillation for BEV point-cloud detectors."""

__version__ = "0.1.0"
