"""Synthetic scene oracle, balanced pair sampling, and evaluation metrics.

The generator builds scenes by construction — known poses, known 3D points,
exact projections plus controlled pixel noise and labeled outliers — so every
geometric operation in the package can be checked against ground truth without
any pretrained model or dataset. Scenes export to full tensor-backed manifests
(including retrieval fixtures) so the CLI and service can be driven end to end
from synthetic data.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .errors import PosekitError
from .geometry import CameraIntrinsics
from .rotations import axis_angle_rotation, geodesic_angle_deg


@dataclass
class SynthConfig:
    n_points: int = 200
    noise_px: float = 0.0
    outlier_ratio: float = 0.0
    n_views: int = 2
    rotation_range_deg: float = 30.0
    depth_range: tuple[float, float] = (4.0, 8.0)
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(600.0, 600.0, 320.0, 240.0)
    )
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be positive")
        if self.noise_px < 0:
            raise ValueError("noise_px must be >= 0")
        if not 0.0 <= self.outlier_ratio < 1.0:
            raise ValueError("outlier_ratio must lie in [0, 1)")
        if self.n_views < 2:
            raise ValueError("need at least 2 views")
        if not 0.0 < self.rotation_range_deg <= 180.0:
            raise ValueError("rotation_range_deg must lie in (0, 180]")
        zmin, zmax = self.depth_range
        if not (zmin > 0 and zmax > zmin):
            raise ValueError("depth_range must satisfy 0 < z_min < z_max")

    @property
    def image_size(self) -> tuple[int, int]:
        return (int(round(2 * self.intrinsics.cx)), int(round(2 * self.intrinsics.cy)))


@dataclass
class SynthMatchSet:
    points_a: np.ndarray  # (n, 2) pixels in view_a
    points_b: np.ndarray  # (n, 2) pixels in view_b
    confidences: np.ndarray  # (n,)
    inlier_labels: np.ndarray  # (n,) bool ground truth
    point_ids: np.ndarray  # (n,) generator point index behind each match


@dataclass
class SynthScene:
    config: SynthConfig
    rotations: list[np.ndarray]  # world-to-camera, world = view 0 camera frame
    translations: list[np.ndarray]
    points: np.ndarray  # (n, 3) world frame
    observations: np.ndarray  # (v, n, 2) noisy pixel projections
    matchsets: dict[tuple[int, int], SynthMatchSet]

    def relative_pose(self, view_a: int, view_b: int) -> tuple[np.ndarray, np.ndarray]:
        """Ground-truth (R, t) mapping view_a camera coordinates into view_b."""
        r = self.rotations[view_b] @ self.rotations[view_a].T
        t = self.translations[view_b] - r @ self.translations[view_a]
        return r, t

    def relative_angle_deg(self, view_a: int, view_b: int) -> float:
        return geodesic_angle_deg(self.rotations[view_a], self.rotations[view_b])


def synth_scene(cfg: SynthConfig) -> SynthScene:
    """Generate a deterministic synthetic scene.

    Points are uniform in the anchor view's frustum within the depth range;
    the other cameras orbit the cloud centroid with rotation angles spread
    over the configured range (small axis jitter avoids a pure turntable).
    Inlier matches are exact projections plus isotropic Gaussian pixel noise
    drawn once per (point, view); outliers replace the second endpoint with a
    uniform image pixel. Inlier confidences ~ U(0.85, 1), outliers ~ U(0, 0.9).
    """
    rng = np.random.default_rng(cfg.seed)
    k = cfg.intrinsics
    w, h = cfg.image_size
    zmin, zmax = cfg.depth_range

    base_axis = rng.normal(size=3)
    base_axis /= np.linalg.norm(base_axis)

    # rotation magnitudes spread across the range so pair angles cover it
    v = cfg.n_views
    angles = [0.0]
    lows = np.linspace(0.0, cfg.rotation_range_deg, v)[:-1]
    highs = np.linspace(0.0, cfg.rotation_range_deg, v)[1:]
    floor = 0.05 * cfg.rotation_range_deg
    for lo, hi in zip(lows, highs):
        angles.append(float(rng.uniform(max(lo, floor), hi)))

    # cameras orbit the cloud center (sets the relative rotation) and are
    # shifted sideways so the baseline stays well conditioned at small angles
    center = np.array([0.0, 0.0, 0.5 * (zmin + zmax)])
    rotations = [np.eye(3)]
    translations = [np.zeros(3)]
    for ang in angles[1:]:
        axis = base_axis + 0.15 * rng.normal(size=3)
        a = axis_angle_rotation(axis, math.radians(ang))
        shift = rng.normal(size=3)
        shift[2] *= 0.3  # mostly transverse, keeps the cloud in frame
        shift *= rng.uniform(0.4, 1.0) / np.linalg.norm(shift)
        rotations.append(a)
        translations.append(center - a @ center + shift)

    # points uniform in the anchor frustum, kept only if in front of every camera
    pts: list[np.ndarray] = []
    kinv_scale = np.array([1.0 / k.fx, 1.0 / k.fy])
    attempts = 0
    while len(pts) < cfg.n_points and attempts < 1000:
        attempts += 1
        m = max(cfg.n_points, 2 * (cfg.n_points - len(pts)))
        uv = rng.uniform([0.0, 0.0], [w, h], size=(m, 2))
        z = rng.uniform(zmin, zmax, size=m)
        xy = (uv - [k.cx, k.cy]) * kinv_scale * z[:, None]
        cand = np.column_stack([xy, z])
        ok = np.ones(m, dtype=bool)
        for r, t in zip(rotations[1:], translations[1:]):
            ok &= (cand @ r.T + t)[:, 2] > 0.25 * zmin
        for p in cand[ok]:
            if len(pts) < cfg.n_points:
                pts.append(p)
    if len(pts) < cfg.n_points:
        raise PosekitError("could not place points in front of all cameras")
    points = np.array(pts)

    observations = np.empty((v, cfg.n_points, 2))
    for i, (r, t) in enumerate(zip(rotations, translations)):
        exact = k.project(points @ r.T + t)
        noise = rng.normal(size=exact.shape) * cfg.noise_px
        observations[i] = exact + noise

    n_out = int(round(cfg.n_points * cfg.outlier_ratio))
    matchsets: dict[tuple[int, int], SynthMatchSet] = {}
    for i in range(v):
        for j in range(i + 1, v):
            pa = observations[i].copy()
            pb = observations[j].copy()
            labels = np.ones(cfg.n_points, dtype=bool)
            if n_out:
                out_idx = rng.choice(cfg.n_points, size=n_out, replace=False)
                pb[out_idx] = rng.uniform([0.0, 0.0], [w, h], size=(n_out, 2))
                labels[out_idx] = False
            conf = np.where(
                labels,
                rng.uniform(0.85, 1.0, size=cfg.n_points),
                rng.uniform(0.0, 0.9, size=cfg.n_points),
            )
            matchsets[(i, j)] = SynthMatchSet(
                points_a=pa,
                points_b=pb,
                confidences=conf,
                inlier_labels=labels,
                point_ids=np.arange(cfg.n_points),
            )
    return SynthScene(cfg, rotations, translations, points, observations, matchsets)


# --- balanced pair sampling ------------------------------------------------------


@dataclass
class PairSampleSpec:
    bins: list[tuple[float, float]]
    pairs_per_bin: int

    def __post_init__(self):
        if self.pairs_per_bin < 1:
            raise ValueError("pairs_per_bin must be positive")
        b = sorted((float(lo), float(hi)) for lo, hi in self.bins)
        if not b or b[0][0] != 0.0:
            raise ValueError("bins must start at 0 degrees")
        for (lo, hi), (lo2, _) in zip(b, b[1:]):
            if hi != lo2:
                raise ValueError("bins must be disjoint and contiguous")
        if any(hi <= lo for lo, hi in b):
            raise ValueError("bins must have positive width")
        self.bins = b


def sample_balanced_pairs(
    rotations: list[np.ndarray], spec: PairSampleSpec, seed: int = 0
) -> list[tuple[int, int]]:
    """Sample pairs_per_bin view pairs per relative-angle bin, uniformly within
    each bin; raises naming the first bin that cannot be filled."""
    rng = np.random.default_rng(seed)
    n = len(rotations)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    angles = np.array([geodesic_angle_deg(rotations[i], rotations[j]) for i, j in pairs])
    last_hi = spec.bins[-1][1]
    out: list[tuple[int, int]] = []
    for lo, hi in spec.bins:
        if hi == last_hi:
            member = (angles >= lo) & (angles <= hi)
        else:
            member = (angles >= lo) & (angles < hi)
        idx = np.flatnonzero(member)
        if len(idx) < spec.pairs_per_bin:
            raise PosekitError(
                f"bin [{lo}, {hi}) has {len(idx)} candidate pairs, "
                f"need {spec.pairs_per_bin}"
            )
        chosen = rng.choice(idx, size=spec.pairs_per_bin, replace=False)
        out.extend(pairs[c] for c in chosen)
    return out


# --- pose metrics -----------------------------------------------------------------


@dataclass
class MetricsReport:
    median_err_deg: float
    acc15: float
    acc30: float
    n_pairs: int

    def __post_init__(self):
        if not 0.0 <= self.acc15 <= self.acc30 <= 1.0:
            raise ValueError("accuracies must satisfy 0 <= acc15 <= acc30 <= 1")


def compute_pose_metrics(errors_deg) -> MetricsReport:
    """Median error plus strict-threshold accuracies at 15 and 30 degrees."""
    errs = np.asarray(list(errors_deg), dtype=float)
    if errs.size == 0:
        raise ValueError("cannot compute metrics for an empty error list")
    return MetricsReport(
        median_err_deg=float(np.median(errs)),
        acc15=float(np.count_nonzero(errs < 15.0)) / errs.size,
        acc30=float(np.count_nonzero(errs < 30.0)) / errs.size,
        n_pairs=int(errs.size),
    )


# --- segmentation / retrieval metrics ----------------------------------------------


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; both-empty counts as 1."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def mask_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    """Pixelwise agreement fraction between two binary masks."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.count_nonzero(pred == gt)) / pred.size


def retrieval_map(results) -> float:
    """Mean average precision with one relevant item per query: mean of 1/rank.

    `results` is an iterable of (ranked_ids, gt_id); a missing ground truth
    contributes 0 for that query.
    """
    results = list(results)
    if not results:
        raise ValueError("retrieval_map needs at least one query")
    total = 0.0
    for ranked, gt in results:
        ranked = list(ranked)
        if gt in ranked:
            total += 1.0 / (ranked.index(gt) + 1)
    return total / len(results)


# --- mask crops ----------------------------------------------------------------------


@dataclass(frozen=True)
class CropTransform:
    """Pixel translation between crop coordinates and full-image coordinates."""

    dx: int
    dy: int

    def to_full(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=float) + np.array([self.dx, self.dy], dtype=float)

    def to_crop(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=float) - np.array([self.dx, self.dy], dtype=float)

    def matrix(self) -> np.ndarray:
        return np.array([[1.0, 0.0, self.dx], [0.0, 1.0, self.dy], [0.0, 0.0, 1.0]])


def crop_masked_object(
    image: np.ndarray, mask: np.ndarray, pad_ratio: float = 0.1
) -> tuple[np.ndarray, CropTransform]:
    """Zero the background and crop to the mask's padded bounding box.

    The padding is pad_ratio of the box extent per side (rounded, so it never
    shrinks the box) and is clamped to the image. The returned transform maps
    crop pixel coordinates back to full-image coordinates exactly.
    """
    image = np.asarray(image)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != image.shape[:2]:
        raise ValueError("mask must match the image's spatial shape")
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("mask is empty")
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    pad_x = int(round((x1 - x0 + 1) * pad_ratio))
    pad_y = int(round((y1 - y0 + 1) * pad_ratio))
    x0 = max(0, x0 - pad_x)
    y0 = max(0, y0 - pad_y)
    x1 = min(image.shape[1] - 1, x1 + pad_x)
    y1 = min(image.shape[0] - 1, y1 + pad_y)
    masked = image * (mask if image.ndim == 2 else mask[:, :, None])
    crop = masked[y0 : y1 + 1, x0 : x1 + 1].copy()
    return crop, CropTransform(dx=x0, dy=y0)


# --- manifest export -------------------------------------------------------------------


def export_manifest(
    scene: SynthScene,
    out_dir: str,
    n_proposals: int = 4,
    embed_dim: int = 32,
    matches_per_proposal: int = 64,
) -> str:
    """Write a scene as a relocatable manifest bundle and return the manifest path.

    Besides views, ground-truth poses and all pair matchsets (with inlier
    labels), the bundle carries retrieval fixtures: one prompt anchored to the
    first view and `n_proposals` mask proposals on the second view, where the
    ground-truth proposal's embedding is a slightly perturbed copy of the
    prompt embedding and its matches carry confidences above the usual 0.9
    threshold (decoys straddle it from below).
    """
    cfg = scene.config
    rng = np.random.default_rng([cfg.seed, 9173])
    os.makedirs(os.path.join(out_dir, "tensors"), exist_ok=True)
    w, h = cfg.image_size

    def put(name: str, arr: np.ndarray) -> str:
        rel = os.path.join("tensors", name)
        tensorio.write_tensor(os.path.join(out_dir, rel), arr)
        return rel

    views = []
    for i, (r, t) in enumerate(zip(scene.rotations, scene.translations)):
        views.append(
            {
                "view_id": i,
                "image_size": [w, h],
                "intrinsics": cfg.intrinsics.matrix().tolist(),
                "gt_pose": {"r": list(np.asarray(r).ravel()), "t": list(np.asarray(t))},
            }
        )

    matchsets = []
    for (i, j), ms in sorted(scene.matchsets.items()):
        tag = f"m{i}_{j}"
        matchsets.append(
            {
                "view_a": i,
                "view_b": j,
                "points_a_path": put(f"{tag}_a.ptns", ms.points_a),
                "points_b_path": put(f"{tag}_b.ptns", ms.points_b),
                "confidence_path": put(f"{tag}_conf.ptns", ms.confidences),
                "gt_inliers_path": put(f"{tag}_gt.ptns", ms.inlier_labels.astype(np.uint8)),
            }
        )

    # retrieval fixtures: prompt on view 0, proposals on view 1
    prompt_emb = rng.normal(size=embed_dim)
    prompt_emb /= np.linalg.norm(prompt_emb)
    gt_prop = int(rng.integers(n_proposals))
    support_px = cfg.intrinsics.project(scene.points)
    lo = np.clip(support_px.min(axis=0), 0, [w - 2, h - 2])
    hi = np.clip(support_px.max(axis=0), lo + 1, [w - 1, h - 1])
    prompt_bbox = [float(lo[0]), float(lo[1]), float(hi[0] - lo[0]), float(hi[1] - lo[1])]

    prompts = [
        {
            "prompt_id": "prompt0",
            "view_id": 0,
            "embedding_path": put("prompt0_emb.ptns", prompt_emb),
            "bbox_px": prompt_bbox,
            "gt_proposal": gt_prop,
        }
    ]

    proposals = []
    cell_w, cell_h = w // (n_proposals + 1), h // 3
    for p in range(n_proposals):
        if p == gt_prop:
            emb = prompt_emb + 0.05 * rng.normal(size=embed_dim)
        else:
            emb = rng.normal(size=embed_dim)
        emb /= np.linalg.norm(emb)
        x0 = (p + 1) * cell_w - cell_w // 2
        y0 = h // 3
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[y0 : y0 + cell_h, x0 : x0 + cell_w] = 1
        proposals.append(
            {
                "view_id": 1,
                "proposal_id": p,
                "mask_path": put(f"prop{p}_mask.ptns", mask),
                "embedding_path": put(f"prop{p}_emb.ptns", emb),
                "bbox_px": [float(x0), float(y0), float(cell_w), float(cell_h)],
            }
        )
        n_m = matches_per_proposal
        pa = rng.uniform([prompt_bbox[0], prompt_bbox[1]],
                         [prompt_bbox[0] + prompt_bbox[2], prompt_bbox[1] + prompt_bbox[3]],
                         size=(n_m, 2))
        pb = rng.uniform([x0, y0], [x0 + cell_w, y0 + cell_h], size=(n_m, 2))
        if p == gt_prop:
            conf = rng.uniform(0.92, 1.0, size=n_m)
        else:
            conf = rng.uniform(0.3, 0.88, size=n_m)
        matchsets.append(
            {
                "view_a": 1,
                "prompt_id": "prompt0",
                "proposal_id": p,
                "points_a_path": put(f"pm{p}_a.ptns", pa),
                "points_b_path": put(f"pm{p}_b.ptns", pb),
                "confidence_path": put(f"pm{p}_conf.ptns", conf),
            }
        )

    doc = {
        "version": 1,
        "views": views,
        "prompts": prompts,
        "proposals": proposals,
        "matchsets": matchsets,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return manifest_path
