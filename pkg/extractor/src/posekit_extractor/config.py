"""Extractor configuration, loadable from YAML."""

from dataclasses import dataclass, field

import yaml


@dataclass
class ExtractorConfig:
    segmenter: str = "builtin:watershed"
    embedder: str = "builtin:grid-hog"
    matcher: str = "builtin:zncc"
    grid_points_per_axis: int = 16  # density of the segmentation seed lattice
    crop_size: int = 128  # embedding/matching input size (letterboxed)
    device: str = "cpu"  # accepted for parity; builtin backends ignore it
    min_mask_area_fraction: float = 0.001
    max_proposals: int = 8
    match_search_radius: int = 12
    match_patch: int = 11
    prompt_image: str | None = None  # default: first image (sorted) is the support
    focal_scale: float = 1.2  # fx = fy = focal_scale * max(w, h) when unknown
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.grid_points_per_axis < 1:
            raise ValueError("grid_points_per_axis must be >= 1")
        if self.crop_size < 16:
            raise ValueError("crop_size must be >= 16")
        if not 0.0 <= self.min_mask_area_fraction < 1.0:
            raise ValueError("min_mask_area_fraction must lie in [0, 1)")
        if self.max_proposals < 1:
            raise ValueError("max_proposals must be >= 1")
        if self.match_patch % 2 == 0:
            raise ValueError("match_patch must be odd")


def load_config(path: str | None) -> ExtractorConfig:
    if path is None:
        return ExtractorConfig()
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    known = {f for f in ExtractorConfig.__dataclass_fields__ if f != "extra"}
    kwargs = {k: v for k, v in doc.items() if k in known}
    extra = {k: v for k, v in doc.items() if k not in known}
    return ExtractorConfig(extra=extra, **kwargs)
