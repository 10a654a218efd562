"""Data distillation: multi-transform inference, hard-label generation and retraining."""

__version__ = "0.1.0"
