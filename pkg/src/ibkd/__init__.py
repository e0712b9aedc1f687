"""Information-bottleneck knowledge distillation for text representations."""

__version__ = "0.1.0"
