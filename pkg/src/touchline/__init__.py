"""Toy touch-line grounding: synthetic pointing scenes, a small numpy transformer, and its losses."""

__version__ = "0.1.0"
