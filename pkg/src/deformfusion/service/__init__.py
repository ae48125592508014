"""HTTP service exposing the reconstruction pipeline as streaming sessions."""

from .app import create_app

__all__ = ["create_app"]
