"""Non-rigid model-to-scan registration and point-based fusion."""

__version__ = "0.1.0"
