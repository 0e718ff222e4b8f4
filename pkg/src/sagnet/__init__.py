"""Structure-aware generative modeling of part-based 3D shapes."""

__version__ = "0.1.0"
