from .config import Config


__version__ = "1.0.0"
__all__ = ["Config", "__version__"]
