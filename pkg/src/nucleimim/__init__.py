"""Instance-aware masked image modelling for nuclei representations."""

__version__ = "0.1.0"
