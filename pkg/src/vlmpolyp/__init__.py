"""Zero-shot VLM polyp detection/classification harness with TiLense heat maps."""

from .labels import PathologyClass

__version__ = "0.1.0"

__all__ = ["PathologyClass", "__version__"]
