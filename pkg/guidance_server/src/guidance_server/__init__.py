"""Guidance service speaking the predict_noise wire protocol."""

from .server import (GrayPullBackend, ServerConfig, StubBackend, create_app)

__all__ = ["ServerConfig", "StubBackend", "GrayPullBackend", "create_app"]
