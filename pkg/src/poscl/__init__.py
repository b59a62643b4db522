"""Position-based contrastive pretraining on synthetic volumetric phantoms."""

from .errors import ConfigError, DimensionError, DomainError, NumericAbort, PCLError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DimensionError", "DomainError", "NumericAbort", "PCLError", "__version__"]
