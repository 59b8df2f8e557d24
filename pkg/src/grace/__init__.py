"""Graph-regularized entanglement head for sequence-level fake detection."""

__version__ = "0.1.0"
