"""Hybrid quantum-classical mixture-of-experts models trained federatedly under CKKS encryption."""

__version__ = "0.1.0"
