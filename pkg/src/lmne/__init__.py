"""Large-margin neighborhood-embedding similarity learning."""

__version__ = "0.1.0"
