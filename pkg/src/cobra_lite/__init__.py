"""Patient-level slide representations from patch-embedding bags."""

__version__ = "0.1.0"
