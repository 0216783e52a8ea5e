"""Position-sensitive region detector on a small residual backbone."""

__version__ = "0.1.0"
