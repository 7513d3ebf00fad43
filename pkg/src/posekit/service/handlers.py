"""Service handlers: pure functions from request models to response models.

The FastAPI routes and the CLI both call these, so command-line runs and HTTP
runs produce identical payloads (timing aside).
"""

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .. import evalharness, multiview, overlay, retrieval, tensorio
from ..errors import ManifestError
from ..geometry import CameraIntrinsics, RansacConfig, recover_translation_scale, two_view_pose
from ..rotations import geodesic_angle_deg, vector_angle_deg
from . import models


def worker_count() -> int:
    """Worker cap from POSEKIT_THREADS (0 or unset = auto)."""
    raw = os.environ.get("POSEKIT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        return min(32, os.cpu_count() or 1)
    return n


def _intrinsics_of(view) -> CameraIntrinsics:
    return CameraIntrinsics.from_matrix(view.intrinsics)


def _ransac_config(req) -> RansacConfig:
    return RansacConfig(
        max_iterations=req.max_iterations,
        inlier_threshold=req.threshold,
        confidence=req.confidence,
        seed=req.seed,
    )


def handle_synth(req: models.SynthRequest) -> models.SynthResponse:
    t0 = time.perf_counter()
    cfg = evalharness.SynthConfig(
        n_points=req.n_points,
        noise_px=req.noise_px,
        outlier_ratio=req.outlier_ratio,
        n_views=req.n_views,
        rotation_range_deg=req.rotation_range_deg,
        depth_range=(req.depth_min, req.depth_max),
        intrinsics=CameraIntrinsics(req.fx, req.fy, req.cx, req.cy, req.skew),
        seed=req.seed,
    )
    scene = evalharness.synth_scene(cfg)
    t1 = time.perf_counter()
    manifest_path = evalharness.export_manifest(scene, req.out_dir, n_proposals=req.n_proposals)
    t2 = time.perf_counter()
    return models.SynthResponse(
        manifest_path=manifest_path,
        n_views=cfg.n_views,
        n_points=cfg.n_points,
        n_matchsets=len(scene.matchsets) + req.n_proposals,
        timing_ms={"generate": (t1 - t0) * 1e3, "export": (t2 - t1) * 1e3},
    )


def handle_retrieve(req: models.RetrieveRequest) -> models.RetrieveResponse:
    t0 = time.perf_counter()
    manifest = tensorio.load_manifest(req.manifest_path)
    prompt = manifest.prompt(req.prompt_id)
    proposals = sorted(manifest.proposals, key=lambda p: (p.view_id, p.proposal_id))
    if not proposals:
        raise ManifestError("manifest has no proposals to retrieve from")
    prompt_emb = manifest.load_tensor(prompt.embedding_path)
    proposal_embs = [manifest.load_tensor(p.embedding_path) for p in proposals]

    has_local = any(m.prompt_id == req.prompt_id for m in manifest.matchsets)

    def matcher(idx: int) -> retrieval.MatchSet:
        ref = manifest.prompt_matchset(req.prompt_id, proposals[idx].proposal_id)
        pa, pb, conf, _ = manifest.matchset_arrays(ref)
        return retrieval.MatchSet(pa, pb, conf)

    cfg = retrieval.RetrievalConfig(top_k=req.top_k, sigma=req.sigma)
    result = retrieval.hierarchical_retrieve(
        prompt_emb, proposal_embs, matcher if has_local else None, cfg
    )
    t1 = time.perf_counter()
    return models.RetrieveResponse(
        prompt_id=req.prompt_id,
        best_proposal=proposals[result.best_index].proposal_id,
        proposal_ids=[p.proposal_id for p in proposals],
        similarity_row=[float(s) for s in result.similarity_row],
        criteria_scores=[None if s is None else float(s) for s in result.criteria_scores],
        top_k=req.top_k,
        sigma=req.sigma,
        gt_proposal=prompt.gt_proposal,
        timing_ms={"retrieve": (t1 - t0) * 1e3},
    )


def _oriented_pair(manifest, view_a: int, view_b: int):
    """Matchset arrays oriented so the first array belongs to view_a."""
    ref = manifest.find_matchset(view_a, view_b)
    pa, pb, conf, gt = manifest.matchset_arrays(ref)
    if (ref.view_a, ref.view_b) == (view_a, view_b):
        return pa, pb, conf, gt
    return pb, pa, conf, gt


def handle_pose2v(req: models.TwoViewRequest) -> models.TwoViewResponse:
    t0 = time.perf_counter()
    manifest = tensorio.load_manifest(req.manifest_path)
    view_a = manifest.view(req.view_a)
    view_b = manifest.view(req.view_b)
    points_a, points_b, _, _ = _oriented_pair(manifest, req.view_a, req.view_b)
    k_a, k_b = _intrinsics_of(view_a), _intrinsics_of(view_b)
    t1 = time.perf_counter()

    result = two_view_pose(points_a, points_b, k_a, k_b, _ransac_config(req))
    pose = result.pose
    scaled = False
    if req.scale_prompt_id is not None:
        prompt = manifest.prompt(req.scale_prompt_id)
        if prompt.view_id != req.view_a:
            raise ManifestError(
                f"prompt {req.scale_prompt_id!r} annotates view {prompt.view_id}, "
                f"not the support view {req.view_a}"
            )
        pose = recover_translation_scale(pose, result.cloud, prompt.bbox_px, k_a)
        scaled = True
    t2 = time.perf_counter()

    from ..geometry import normalize_correspondences, sampson_distance

    na, nb = normalize_correspondences(points_a, points_b, k_a, k_b)
    d = sampson_distance(result.essential, na[result.inlier_mask], nb[result.inlier_mask])
    stats = models.ResidualStats(
        mean=float(np.mean(d)), median=float(np.median(d)), max=float(np.max(d)), rms=float(np.sqrt(np.mean(d**2)))
    )

    rot_err = None
    trans_err = None
    if view_a.gt_pose is not None and view_b.gt_pose is not None:
        r_a, t_a = view_a.gt_pose
        r_b, t_b = view_b.gt_pose
        r_rel = r_b @ r_a.T
        t_rel = t_b - r_rel @ t_a
        rot_err = geodesic_angle_deg(pose.r, r_rel)
        if np.linalg.norm(t_rel) > 1e-12:
            trans_err = vector_angle_deg(pose.t, t_rel)

    svg_lines = None
    if req.svg_path is not None:
        f = np.linalg.inv(k_b.matrix()).T @ result.essential.e @ np.linalg.inv(k_a.matrix())
        inl = result.inlier_mask
        svg_lines = overlay.epipolar_svg(
            req.svg_path, view_b.image_size, f, points_a[inl], points_b[inl]
        )
    t3 = time.perf_counter()

    return models.TwoViewResponse(
        view_a=req.view_a,
        view_b=req.view_b,
        r=[float(v) for v in pose.r.ravel()],
        t=[float(v) for v in pose.t],
        scaled=scaled,
        inliers=int(result.inlier_mask.sum()),
        n_matches=len(points_a),
        iterations_used=result.iterations_used,
        residual_stats=stats,
        n_cloud_points=len(result.cloud),
        rotation_error_deg=rot_err,
        translation_angle_deg=trans_err,
        svg_path=req.svg_path,
        svg_lines=svg_lines,
        timing_ms={"load": (t1 - t0) * 1e3, "solve": (t2 - t1) * 1e3, "report": (t3 - t2) * 1e3},
    )


def handle_pose_mv(req: models.MultiViewRequest) -> models.MultiViewResponse:
    t0 = time.perf_counter()
    manifest = tensorio.load_manifest(req.manifest_path)
    selected = sorted(v.view_id for v in manifest.views)[: req.views]
    if len(selected) < req.views:
        raise ManifestError(f"manifest has {len(selected)} views, requested {req.views}")
    chosen = set(selected)
    intrinsics = {vid: _intrinsics_of(manifest.view(vid)) for vid in selected}
    matchsets = {}
    for ref in manifest.matchsets:
        if ref.view_b is None:
            continue
        if ref.view_a in chosen and ref.view_b in chosen:
            pa, pb, _, _ = manifest.matchset_arrays(ref)
            key = (min(ref.view_a, ref.view_b), max(ref.view_a, ref.view_b))
            matchsets[key] = (pa, pb) if ref.view_a == key[0] else (pb, pa)
    t1 = time.perf_counter()

    result = multiview.build_map(
        intrinsics, matchsets, _ransac_config(req), min_parallax_deg=req.min_parallax_deg
    )
    t2 = time.perf_counter()

    scene_map = result.map
    anchor = manifest.view(scene_map.anchor_view_id)
    gt_anchor = anchor.gt_pose
    gt_scale = None
    if gt_anchor is not None:
        base = manifest.view(scene_map.baseline_view_id).gt_pose
        if base is not None:
            r_rel = base[0] @ gt_anchor[0].T
            gt_scale = float(np.linalg.norm(base[1] - r_rel @ gt_anchor[1]))

    records = []
    rot_errs = []
    for vid, mv in scene_map.views.items():
        rec = models.ViewPoseRecord(
            view_id=vid,
            r=[float(v) for v in mv.rotation.ravel()],
            t=[float(v) for v in mv.translation],
        )
        gt = manifest.view(vid).gt_pose
        if gt is not None and gt_anchor is not None:
            r_rel = gt[0] @ gt_anchor[0].T
            t_rel = gt[1] - r_rel @ gt_anchor[1]
            rec.rotation_error_deg = geodesic_angle_deg(mv.rotation, r_rel)
            if gt_scale is not None and gt_scale > 1e-12:
                rec.translation_error = float(np.linalg.norm(mv.translation * gt_scale - t_rel))
            if vid != scene_map.anchor_view_id:
                rot_errs.append(rec.rotation_error_deg)
        records.append(rec)

    return models.MultiViewResponse(
        registered=result.registration_order,
        failed=result.failed_views,
        views=records,
        n_tracks=len(scene_map.tracks),
        n_observations=scene_map.observation_count(),
        reprojection_rms_px=multiview.reprojection_rms(scene_map),
        median_rotation_error_deg=float(np.median(rot_errs)) if rot_errs else None,
        map=multiview.map_to_dict(scene_map),
        timing_ms={"load": (t1 - t0) * 1e3, "build": (t2 - t1) * 1e3},
    )


def handle_eval(req: models.EvalRequest) -> models.EvalResponse:
    t0 = time.perf_counter()

    def load_error(path: str) -> float:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        err = doc.get("rotation_error_deg")
        if err is None:
            raise ManifestError(f"{path}: report lacks rotation_error_deg (no ground truth?)")
        return float(err)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        errors = list(pool.map(load_error, req.report_paths))
    report = evalharness.compute_pose_metrics(errors)
    t1 = time.perf_counter()
    return models.EvalResponse(
        median_err_deg=report.median_err_deg,
        acc15=report.acc15,
        acc30=report.acc30,
        n_pairs=report.n_pairs,
        timing_ms={"eval": (t1 - t0) * 1e3},
    )
