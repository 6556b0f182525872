"""Analytical performance and chiplet cost modeling for distributed LLM training and inference."""

__version__ = "0.1.0"
