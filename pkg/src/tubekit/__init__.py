"""Snake upsampling, boundary-skeleton weighted loss and tubular-structure metrics."""

__version__ = "0.1.0"
