"""Parametric room impulse responses with keyed late-field watermarks."""

__version__ = "0.1.0"
