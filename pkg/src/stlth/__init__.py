"""stlth: a desk-scale lottery-ticket laboratory for style-transfer networks."""

from .backend import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
