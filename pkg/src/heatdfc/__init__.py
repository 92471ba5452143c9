"""Heat-kernel dynamic correlation, connectivity states and twin heritability."""

__version__ = "0.1.0"
