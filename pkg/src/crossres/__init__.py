"""Cross-resolution dual distillation for one-stream transformer tracking."""

__version__ = "0.1.0"
