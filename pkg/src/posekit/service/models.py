"""Pydantic request/response models shared by the HTTP service and the CLI."""

from pydantic import BaseModel, Field, model_validator


class SynthRequest(BaseModel):
    out_dir: str
    n_points: int = Field(200, ge=1)
    noise_px: float = Field(0.0, ge=0.0)
    outlier_ratio: float = Field(0.0, ge=0.0, lt=1.0)
    n_views: int = Field(2, ge=2)
    rotation_range_deg: float = Field(30.0, gt=0.0, le=180.0)
    depth_min: float = Field(4.0, gt=0.0)
    depth_max: float = Field(8.0, gt=0.0)
    fx: float = Field(600.0, gt=0.0)
    fy: float = Field(600.0, gt=0.0)
    cx: float = 320.0
    cy: float = 240.0
    skew: float = 0.0
    seed: int = Field(0, ge=0)
    n_proposals: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _depth_order(self):
        if self.depth_max <= self.depth_min:
            raise ValueError("depth_max must exceed depth_min")
        return self


class SynthResponse(BaseModel):
    schema_version: int = 1
    manifest_path: str
    n_views: int
    n_points: int
    n_matchsets: int
    timing_ms: dict[str, float] = {}


class RetrieveRequest(BaseModel):
    manifest_path: str
    prompt_id: str
    top_k: int = Field(3, ge=1)
    sigma: float = Field(0.9, ge=0.0, le=1.0)


class RetrieveResponse(BaseModel):
    schema_version: int = 1
    prompt_id: str
    best_proposal: int
    proposal_ids: list[int]
    similarity_row: list[float]
    criteria_scores: list[float | None]
    top_k: int
    sigma: float
    gt_proposal: int | None = None
    timing_ms: dict[str, float] = {}


class TwoViewRequest(BaseModel):
    manifest_path: str
    view_a: int
    view_b: int
    seed: int = Field(0, ge=0)
    threshold: float = Field(1e-3, gt=0.0)
    max_iterations: int = Field(2048, ge=1)
    confidence: float = Field(0.999, gt=0.0, lt=1.0)
    svg_path: str | None = None
    scale_prompt_id: str | None = None  # recover metric translation from this prompt's bbox


class ResidualStats(BaseModel):
    mean: float
    median: float
    max: float
    rms: float


class TwoViewResponse(BaseModel):
    schema_version: int = 1
    view_a: int
    view_b: int
    r: list[float]  # 9 floats row-major
    t: list[float]
    scaled: bool
    inliers: int
    n_matches: int
    iterations_used: int
    residual_stats: ResidualStats
    n_cloud_points: int
    rotation_error_deg: float | None = None
    translation_angle_deg: float | None = None
    svg_path: str | None = None
    svg_lines: int | None = None
    timing_ms: dict[str, float] = {}


class MultiViewRequest(BaseModel):
    manifest_path: str
    views: int = Field(2, ge=2)
    seed: int = Field(0, ge=0)
    threshold: float = Field(1e-3, gt=0.0)
    max_iterations: int = Field(2048, ge=1)
    confidence: float = Field(0.999, gt=0.0, lt=1.0)
    min_parallax_deg: float = Field(1.0, ge=0.0)


class ViewPoseRecord(BaseModel):
    view_id: int
    r: list[float]
    t: list[float]
    rotation_error_deg: float | None = None
    translation_error: float | None = None


class MultiViewResponse(BaseModel):
    schema_version: int = 1
    registered: list[int]
    failed: list[int]
    views: list[ViewPoseRecord]
    n_tracks: int
    n_observations: int
    reprojection_rms_px: float
    median_rotation_error_deg: float | None = None
    map: dict
    timing_ms: dict[str, float] = {}


class EvalRequest(BaseModel):
    report_paths: list[str] = Field(min_length=1)


class EvalResponse(BaseModel):
    schema_version: int = 1
    median_err_deg: float
    acc15: float
    acc30: float
    n_pairs: int
    timing_ms: dict[str, float] = {}


class HealthResponse(BaseModel):
    status: str
    version: str
