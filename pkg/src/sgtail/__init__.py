"""Long-tail scene-graph training and evaluation on synthetic corpora."""

__version__ = "0.1.0"

from . import backend  # noqa: F401
