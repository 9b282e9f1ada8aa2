"""Radio map estimation by physics-decomposed deep unfolding."""

__version__ = "0.1.0"
