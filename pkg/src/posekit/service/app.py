"""FastAPI application wrapping the posekit pipeline.

Error mapping: malformed requests are rejected by pydantic with 422; bad
input data (manifests, unknown ids, format violations) returns 400; geometric
pipeline failures (no consensus, degeneracy, registration failure) return 409.
"""

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import (
    DegenerateEmbeddingError,
    GeometryError,
    ManifestError,
    MapError,
    PosekitError,
    TensorFormatError,
)
from . import handlers, models


def create_app() -> FastAPI:
    app = FastAPI(title="posekit", version=__version__)

    @app.exception_handler(PosekitError)
    async def _posekit_error(request: Request, exc: PosekitError):
        if isinstance(exc, (ManifestError, TensorFormatError, DegenerateEmbeddingError)):
            status = 400
        elif isinstance(exc, (GeometryError, MapError)):
            status = 409
        else:
            status = 409
        return JSONResponse(
            status_code=status,
            content={"error": type(exc).__name__, "message": str(exc)},
        )

    @app.exception_handler(ValueError)
    async def _value_error(request: Request, exc: ValueError):
        return JSONResponse(
            status_code=400, content={"error": "ValueError", "message": str(exc)}
        )

    @app.get("/api/v1/health", response_model=models.HealthResponse)
    def health():
        return models.HealthResponse(status="ok", version=__version__)

    @app.post("/api/v1/synth", response_model=models.SynthResponse)
    def synth(req: models.SynthRequest):
        return handlers.handle_synth(req)

    @app.post("/api/v1/retrieve", response_model=models.RetrieveResponse)
    def retrieve(req: models.RetrieveRequest):
        return handlers.handle_retrieve(req)

    @app.post("/api/v1/pose2v", response_model=models.TwoViewResponse)
    def pose2v(req: models.TwoViewRequest):
        return handlers.handle_pose2v(req)

    @app.post("/api/v1/pose-mv", response_model=models.MultiViewResponse)
    def pose_mv(req: models.MultiViewRequest):
        return handlers.handle_pose_mv(req)

    @app.post("/api/v1/eval", response_model=models.EvalResponse)
    def eval_reports(req: models.EvalRequest):
        return handlers.handle_eval(req)

    return app


app = create_app()
