"""Multi-teacher selective knowledge distillation for multilingual translation."""

__version__ = "0.1.0"
