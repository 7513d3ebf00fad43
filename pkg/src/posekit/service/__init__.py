"""HTTP service layer: pydantic models, handlers, FastAPI app factory."""

from .app import app, create_app

__all__ = ["app", "create_app"]
