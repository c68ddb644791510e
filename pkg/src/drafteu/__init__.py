"""Epistemic-uncertainty estimation with draft-model ensembles, at toy scale."""

__version__ = "0.1.0"
