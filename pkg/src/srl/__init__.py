"""Object-centric video learning with encoder/decoder mutual refinement."""

__version__ = "0.1.0"
