"""Self-supervised auxiliary tasks for fine-grained classification at desk scale."""

__version__ = "0.1.0"
