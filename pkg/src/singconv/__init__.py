"""singconv: duration-informed acoustic modeling and singing voice conversion."""

__version__ = "0.1.0"
