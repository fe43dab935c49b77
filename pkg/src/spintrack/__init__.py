"""Spin-tracking toolkit for QND Faraday-rotation probing of a precessing ensemble."""

__version__ = "0.1.0"
