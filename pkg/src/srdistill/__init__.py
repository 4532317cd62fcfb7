"""Dataset distillation for single-image super-resolution."""
__version__ = "0.1.0"

from .errors import SRDistillError  # noqa: E402
