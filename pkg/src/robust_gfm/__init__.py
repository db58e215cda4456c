"""Robust graph foundation model: structure-aware pre-training, expert routing and structure refinement."""

__version__ = "0.1.0"
