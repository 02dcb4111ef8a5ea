"""Scenario-based verification harness for a low-speed automated parking stack."""

__version__ = "0.1.0"
