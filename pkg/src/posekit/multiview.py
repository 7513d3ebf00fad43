"""Incremental multi-view registration over a shared track map.

A map is seeded from the best two-view pair (anchor camera at identity,
baseline scaled to 1), new views are registered by PnP against the existing
cloud via pixel-snap track chaining, unclaimed cross-view matches become new
tracks, and a Levenberg-Marquardt pass jointly refines all non-anchor poses
and points while holding the gauge fixed.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .errors import (
    DuplicateViewError,
    GeometryError,
    InsufficientAssociationsError,
    MapError,
)
from .geometry import (
    CameraIntrinsics,
    RansacConfig,
    RelativePose,
    TwoViewResult,
    pnp_solve,
    two_view_pose,
)
from .rotations import project_to_so3, so3_exp

SNAP_RADIUS_PX = 1.0


@dataclass
class MapView:
    view_id: int
    rotation: np.ndarray  # world-to-camera
    translation: np.ndarray
    intrinsics: CameraIntrinsics


@dataclass
class Track:
    point: np.ndarray  # (3,) world frame
    observations: dict[int, np.ndarray]  # view_id -> pixel (2,)


@dataclass
class SceneMap:
    views: dict[int, MapView] = field(default_factory=dict)
    tracks: list[Track] = field(default_factory=list)
    anchor_view_id: int = 0
    baseline_view_id: int = 0
    baseline_scale: float = 1.0

    def validate(self) -> None:
        anchor = self.views[self.anchor_view_id]
        if np.max(np.abs(anchor.rotation - np.eye(3))) > 1e-9 or np.max(np.abs(anchor.translation)) > 1e-9:
            raise MapError("anchor view pose must be identity")
        tb = self.views[self.baseline_view_id].translation
        if abs(np.linalg.norm(tb) - self.baseline_scale) > 1e-6:
            raise MapError("baseline norm drifted from its pinned scale")
        for tr in self.tracks:
            if len(tr.observations) < 2:
                raise MapError("track with fewer than 2 observations")
            for vid in tr.observations:
                if vid not in self.views:
                    raise MapError(f"observation references unknown view {vid}")

    def observation_count(self) -> int:
        return sum(len(t.observations) for t in self.tracks)

    def observations_in_view(self, view_id: int):
        """(track_indices, pixels) for every track observing `view_id`."""
        idx = [i for i, t in enumerate(self.tracks) if view_id in t.observations]
        px = np.array([self.tracks[i].observations[view_id] for i in idx]).reshape(-1, 2)
        return np.array(idx, dtype=int), px


@dataclass
class RefineResult:
    map: SceneMap
    initial_cost: float
    final_cost: float
    converged: bool
    iterations: int


def init_map(
    result: TwoViewResult,
    view_ids: tuple[int, int],
    intrinsics: tuple[CameraIntrinsics, CameraIntrinsics],
) -> SceneMap:
    """Seed a map from a two-view solve: anchor at identity, unit baseline,
    one track per triangulated inlier."""
    if int(result.inlier_mask.sum()) < 8:
        raise MapError("two-view initialization needs at least 8 inliers")
    vid_a, vid_b = view_ids
    m = SceneMap(anchor_view_id=vid_a, baseline_view_id=vid_b)
    m.views[vid_a] = MapView(vid_a, np.eye(3), np.zeros(3), intrinsics[0])
    m.views[vid_b] = MapView(vid_b, result.pose.r.copy(), result.pose.t.copy(), intrinsics[1])
    for pt, idx in zip(result.cloud.points, result.cloud.indices):
        m.tracks.append(
            Track(
                point=pt.copy(),
                observations={
                    vid_a: result.points_a[idx].copy(),
                    vid_b: result.points_b[idx].copy(),
                },
            )
        )
    return m


def _chain_associations(
    scene_map: SceneMap,
    matches: dict[int, tuple[np.ndarray, np.ndarray]],
    snap_px: float = SNAP_RADIUS_PX,
) -> tuple[np.ndarray, np.ndarray]:
    """Chain matches into 2D-3D associations through existing observations.

    `matches` maps a registered view id to (pixels_in_that_view,
    pixels_in_new_view). A match binds to a track when its registered-side
    pixel lies within the snap radius of that track's observation; each track
    keeps only its closest association.
    """
    best: dict[int, tuple[float, np.ndarray]] = {}
    for rid, (px_reg, px_new) in matches.items():
        if rid not in scene_map.views:
            continue
        track_idx, obs_px = scene_map.observations_in_view(rid)
        if len(track_idx) == 0 or len(px_reg) == 0:
            continue
        px_reg = np.asarray(px_reg, dtype=float).reshape(-1, 2)
        px_new = np.asarray(px_new, dtype=float).reshape(-1, 2)
        d = np.linalg.norm(px_reg[:, None, :] - obs_px[None, :, :], axis=2)
        nearest = np.argmin(d, axis=1)
        dist = d[np.arange(len(px_reg)), nearest]
        for mi in np.flatnonzero(dist <= snap_px):
            ti = int(track_idx[nearest[mi]])
            cand = (float(dist[mi]), px_new[mi])
            if ti not in best or cand[0] < best[ti][0]:
                best[ti] = cand
    if not best:
        return np.empty(0, dtype=int), np.empty((0, 2))
    tids = np.array(sorted(best), dtype=int)
    pixels = np.array([best[t][1] for t in tids]).reshape(-1, 2)
    return tids, pixels


def register_view(
    scene_map: SceneMap,
    new_view_id: int,
    matches: dict[int, tuple[np.ndarray, np.ndarray]],
    intrinsics: CameraIntrinsics,
    cfg: RansacConfig,
) -> SceneMap:
    """Register a new view by PnP against the map's tracks.

    Associations come from `_chain_associations`; PnP inlier observations are
    appended to their tracks so later refinement constrains the new pose.
    """
    if new_view_id in scene_map.views:
        raise DuplicateViewError(f"view {new_view_id} is already registered")
    tids, pixels = _chain_associations(scene_map, matches)
    if len(tids) < 6:
        raise InsufficientAssociationsError(
            f"view {new_view_id}: {len(tids)} associations, need 6"
        )
    pts3d = np.array([scene_map.tracks[t].point for t in tids])
    result = pnp_solve(pts3d, pixels, intrinsics, cfg)
    scene_map.views[new_view_id] = MapView(
        new_view_id, result.pose.r.copy(), result.pose.t.copy(), intrinsics
    )
    for ti, px, ok in zip(tids, pixels, result.inlier_mask):
        if ok:
            scene_map.tracks[ti].observations[new_view_id] = px.copy()
    return scene_map


def triangulate_new_tracks(
    scene_map: SceneMap,
    matchsets: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]],
    min_parallax_deg: float = 1.0,
    snap_px: float = SNAP_RADIUS_PX,
) -> SceneMap:
    """Turn unclaimed cross-view correspondences into new tracks.

    Only pairs of registered views contribute; a correspondence is skipped
    when either endpoint already lies within the snap radius of an existing
    observation in its view, when the ray parallax is below the threshold, or
    when the triangulated point fails cheirality in either camera.
    """
    from .geometry import _triangulate_batch  # shared batched DLT

    for (va, vb), (pa, pb) in sorted(matchsets.items()):
        if va not in scene_map.views or vb not in scene_map.views:
            continue
        pa = np.asarray(pa, dtype=float).reshape(-1, 2)
        pb = np.asarray(pb, dtype=float).reshape(-1, 2)
        if len(pa) == 0:
            continue
        view_a, view_b = scene_map.views[va], scene_map.views[vb]

        free = np.ones(len(pa), dtype=bool)
        for vid, px in ((va, pa), (vb, pb)):
            _, obs_px = scene_map.observations_in_view(vid)
            if len(obs_px):
                d = np.linalg.norm(px[:, None, :] - obs_px[None, :, :], axis=2)
                free &= d.min(axis=1) > snap_px
        if not free.any():
            continue

        r_rel = view_b.rotation @ view_a.rotation.T
        t_rel = view_b.translation - r_rel @ view_a.translation
        norm_t = np.linalg.norm(t_rel)
        if norm_t < 1e-12:
            continue
        rel = RelativePose(r_rel, t_rel / norm_t, scaled=False)
        na = view_a.intrinsics.normalize(pa[free])
        nb = view_b.intrinsics.normalize(pb[free])
        pts, parallax, ok = _triangulate_batch(rel, na, nb)
        pts = pts * norm_t  # restore metric scale of the view pair
        depth_b = pts @ rel.r.T + rel.t
        keep = ok & (parallax >= min_parallax_deg) & (pts[:, 2] > 0) & (depth_b[:, 2] > 0)
        if not keep.any():
            continue
        world = (pts[keep] - view_a.translation) @ view_a.rotation
        src = np.flatnonzero(free)[keep]
        for w_pt, mi in zip(world, src):
            scene_map.tracks.append(
                Track(point=w_pt, observations={va: pa[mi].copy(), vb: pb[mi].copy()})
            )
    return scene_map


# --- reprojection refinement ---------------------------------------------------


def _gather_observations(scene_map: SceneMap):
    view_ids = list(scene_map.views)
    obs_view, obs_track, obs_px = [], [], []
    for ti, tr in enumerate(scene_map.tracks):
        for vid, px in tr.observations.items():
            obs_view.append(vid)
            obs_track.append(ti)
            obs_px.append(px)
    return view_ids, np.array(obs_view), np.array(obs_track), np.asarray(obs_px, dtype=float).reshape(-1, 2)


def _residuals(scene_map: SceneMap, obs_view, obs_track, obs_px) -> np.ndarray:
    points = np.array([t.point for t in scene_map.tracks])
    res = np.empty_like(obs_px)
    for vid, view in scene_map.views.items():
        sel = obs_view == vid
        if not sel.any():
            continue
        cam = points[obs_track[sel]] @ view.rotation.T + view.translation
        res[sel] = view.intrinsics.project(cam) - obs_px[sel]
    return res


def reprojection_rms(scene_map: SceneMap) -> float:
    """Root-mean-square pixel residual over all observations (0 for an empty map)."""
    if not scene_map.tracks:
        return 0.0
    _, ov, ot, op = _gather_observations(scene_map)
    res = _residuals(scene_map, ov, ot, op)
    return float(np.sqrt((res**2).sum() / len(op)))


def _renormalize_gauge(scene_map: SceneMap) -> None:
    """Rescale the whole scene so the pinned baseline keeps its unit norm.

    A uniform rescale of all translations and points leaves every reprojection
    unchanged, so this never alters the cost."""
    tb = scene_map.views[scene_map.baseline_view_id].translation
    norm = np.linalg.norm(tb)
    if norm < 1e-12:
        return
    s = scene_map.baseline_scale / norm
    for view in scene_map.views.values():
        view.translation = view.translation * s
    for tr in scene_map.tracks:
        tr.point = tr.point * s


def _lm_pass(scene_map: SceneMap, max_iters: int, tol: float):
    """One damped least-squares pass over all non-anchor poses and points."""
    view_ids, obs_view, obs_track, obs_px = _gather_observations(scene_map)
    free_views = [v for v in view_ids if v != scene_map.anchor_view_id]
    pose_off = {v: 6 * i for i, v in enumerate(free_views)}
    n_pose = 6 * len(free_views)
    n_pts = len(scene_map.tracks)
    n_obs = len(obs_px)
    if n_obs == 0:
        return 0.0, 0.0, True, 0

    def snapshot():
        return (
            {v: (mv.rotation.copy(), mv.translation.copy()) for v, mv in scene_map.views.items()},
            [t.point.copy() for t in scene_map.tracks],
        )

    def restore(state):
        poses, pts = state
        for v, (r, t) in poses.items():
            scene_map.views[v].rotation = r
            scene_map.views[v].translation = t
        for tr, p in zip(scene_map.tracks, pts):
            tr.point = p

    def current_cost():
        res = _residuals(scene_map, obs_view, obs_track, obs_px)
        return float((res**2).sum())

    cost = initial = current_cost()
    lam = 1e-3
    converged = False
    iterations = 0
    for it in range(max_iters):
        iterations = it + 1
        points = np.array([t.point for t in scene_map.tracks])
        res_all = np.empty((n_obs, 2))
        rows_parts, cols_parts, data_parts = [], [], []
        row_base = 2 * np.arange(n_obs)
        for vid in view_ids:
            sel = np.flatnonzero(obs_view == vid)
            if len(sel) == 0:
                continue
            view = scene_map.views[vid]
            k = view.intrinsics
            x_w = points[obs_track[sel]]
            cam = x_w @ view.rotation.T + view.translation
            z = cam[:, 2]
            inv_z = 1.0 / z
            proj = np.stack(
                [
                    k.fx * cam[:, 0] * inv_z + k.skew * cam[:, 1] * inv_z + k.cx,
                    k.fy * cam[:, 1] * inv_z + k.cy,
                ],
                axis=1,
            )
            res_all[sel] = proj - obs_px[sel]
            jp = np.zeros((len(sel), 2, 3))
            jp[:, 0, 0] = k.fx * inv_z
            jp[:, 0, 1] = k.skew * inv_z
            jp[:, 0, 2] = -(k.fx * cam[:, 0] + k.skew * cam[:, 1]) * inv_z**2
            jp[:, 1, 1] = k.fy * inv_z
            jp[:, 1, 2] = -k.fy * cam[:, 1] * inv_z**2
            j_point = jp @ view.rotation  # d(residual)/d(world point)
            rows = np.repeat(row_base[sel], 3).reshape(-1, 3)
            rows = np.stack([rows, rows + 1], axis=1)  # (n,2,3)
            pcols = (n_pose + 3 * obs_track[sel])[:, None, None] + np.arange(3)[None, None, :]
            pcols = np.broadcast_to(pcols, rows.shape)
            rows_parts.append(rows.ravel())
            cols_parts.append(pcols.ravel())
            data_parts.append(j_point.ravel())
            if vid != scene_map.anchor_view_id:
                rx = x_w @ view.rotation.T
                j_omega = np.zeros((len(sel), 3, 3))
                j_omega[:, 0, 1] = rx[:, 2]
                j_omega[:, 0, 2] = -rx[:, 1]
                j_omega[:, 1, 0] = -rx[:, 2]
                j_omega[:, 1, 2] = rx[:, 0]
                j_omega[:, 2, 0] = rx[:, 1]
                j_omega[:, 2, 1] = -rx[:, 0]
                j_pose = np.concatenate([jp @ j_omega, jp], axis=2)  # (n,2,6)
                rows6 = np.repeat(row_base[sel], 6).reshape(-1, 6)
                rows6 = np.stack([rows6, rows6 + 1], axis=1)
                ccols = pose_off[vid] + np.arange(6)
                ccols = np.broadcast_to(ccols[None, None, :], rows6.shape)
                rows_parts.append(rows6.ravel())
                cols_parts.append(ccols.ravel())
                data_parts.append(j_pose.ravel())

        jac = sparse.coo_matrix(
            (np.concatenate(data_parts), (np.concatenate(rows_parts), np.concatenate(cols_parts))),
            shape=(2 * n_obs, n_pose + 3 * n_pts),
        ).tocsr()
        grad = jac.T @ res_all.ravel()
        hess = (jac.T @ jac).tocsc()

        accepted = False
        while lam <= 1e12:
            damped = hess + sparse.diags(lam * np.maximum(hess.diagonal(), 1e-12))
            try:
                delta = spsolve(damped, -grad)
            except RuntimeError:
                lam *= 10.0
                continue
            state = snapshot()
            for vid in free_views:
                view = scene_map.views[vid]
                d = delta[pose_off[vid] : pose_off[vid] + 6]
                view.rotation = project_to_so3(so3_exp(d[:3]) @ view.rotation)
                view.translation = view.translation + d[3:]
            for ti, tr in enumerate(scene_map.tracks):
                tr.point = tr.point + delta[n_pose + 3 * ti : n_pose + 3 * ti + 3]
            _renormalize_gauge(scene_map)
            new_cost = current_cost()
            if np.isfinite(new_cost) and new_cost <= cost:
                accepted = True
                improvement = cost - new_cost
                cost = new_cost
                lam = max(lam / 10.0, 1e-15)
                if improvement <= tol * max(cost, 1e-300):
                    converged = True
                break
            restore(state)
            lam *= 10.0
        if not accepted:
            converged = True  # no descent direction left at any damping
            break
        if converged:
            break
    return initial, cost, converged, iterations


def _prune(scene_map: SceneMap) -> int:
    """Drop outlier observations (residual > 4x RMS), cheirality violators,
    and tracks left with fewer than 2 observations. Returns removals."""
    if not scene_map.tracks:
        return 0
    _, ov, ot, op = _gather_observations(scene_map)
    res = _residuals(scene_map, ov, ot, op)
    norms = np.linalg.norm(res, axis=1)
    rms = float(np.sqrt((norms**2).mean()))
    removed = 0
    limit = 4.0 * rms if rms > 0 else math.inf
    for n, vid, ti in zip(norms, ov, ot):
        tr = scene_map.tracks[ti]
        if vid not in tr.observations:
            continue
        view = scene_map.views[vid]
        depth = (view.rotation @ tr.point + view.translation)[2]
        if n > limit or depth <= 0:
            del tr.observations[vid]
            removed += 1
    kept = [t for t in scene_map.tracks if len(t.observations) >= 2]
    removed += len(scene_map.tracks) - len(kept)
    scene_map.tracks = kept
    return removed


def refine_map(scene_map: SceneMap, max_iters: int = 50, convergence_tol: float = 1e-10) -> RefineResult:
    """Joint LM refinement of all non-anchor poses and all points.

    Damping starts at 1e-3, x10 on a rejected step, /10 on acceptance;
    convergence is a relative cost change below `convergence_tol`. The gauge
    (anchor identity, unit first baseline) is held fixed throughout. Between
    passes, observations with residuals above 4x RMS and tracks violating
    cheirality are pruned and the remainder re-refined. Non-convergence
    within the budget returns the best iterate with converged=False.
    """
    initial, cost, converged, used = _lm_pass(scene_map, max_iters, convergence_tol)
    for _ in range(2):
        if used >= max_iters or _prune(scene_map) == 0:
            break
        _, cost, converged, extra = _lm_pass(scene_map, max_iters - used, convergence_tol)
        used += extra
    _renormalize_gauge(scene_map)
    return RefineResult(
        map=scene_map,
        initial_cost=initial,
        final_cost=min(cost, initial),
        converged=converged,
        iterations=used,
    )


# --- incremental pipeline driver --------------------------------------------------


@dataclass
class IncrementalResult:
    map: SceneMap
    registration_order: list[int]
    failed_views: list[int]
    refine: RefineResult


def _matches_for_view(matchsets, view_id, registered):
    out = {}
    for (va, vb), (pa, pb) in matchsets.items():
        if va == view_id and vb in registered:
            out[vb] = (np.asarray(pb), np.asarray(pa))
        elif vb == view_id and va in registered:
            out[va] = (np.asarray(pa), np.asarray(pb))
    return out


def build_map(
    intrinsics: dict[int, CameraIntrinsics],
    matchsets: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]],
    cfg: RansacConfig,
    min_parallax_deg: float = 1.0,
    refine_iters: int = 30,
    convergence_tol: float = 1e-10,
) -> IncrementalResult:
    """Run the full incremental pipeline over a set of views.

    The map is seeded from the pair with the most matches; remaining views are
    registered in descending order of their current 2D-3D association count,
    each registration followed by new-track triangulation and a refinement
    pass. Views that cannot be registered are reported, not fatal.
    """
    if len(intrinsics) < 2:
        raise ValueError("need at least 2 views")
    candidates = [k for k in matchsets if k[0] in intrinsics and k[1] in intrinsics]
    if not candidates:
        raise MapError("no matchsets connect the requested views")
    init_pair = max(candidates, key=lambda k: (len(matchsets[k][0]), -k[0], -k[1]))
    va, vb = init_pair
    pa, pb = matchsets[init_pair]
    result = two_view_pose(pa, pb, intrinsics[va], intrinsics[vb], cfg)
    scene_map = init_map(result, (va, vb), (intrinsics[va], intrinsics[vb]))
    order = [va, vb]
    failed: list[int] = []

    remaining = [v for v in sorted(intrinsics) if v not in scene_map.views]
    while remaining:
        scored = []
        for vid in remaining:
            matches = _matches_for_view(matchsets, vid, set(scene_map.views))
            tids, _ = _chain_associations(scene_map, matches)
            scored.append((len(tids), -vid, vid, matches))
        scored.sort(reverse=True)
        count, _, vid, matches = scored[0]
        remaining.remove(vid)
        if count < 6:
            failed.append(vid)
            continue
        try:
            register_view(scene_map, vid, matches, intrinsics[vid], cfg)
        except (GeometryError, MapError):
            failed.append(vid)
            continue
        order.append(vid)
        fresh = {k: v for k, v in matchsets.items() if vid in k}
        triangulate_new_tracks(scene_map, fresh, min_parallax_deg)
        refine_map(scene_map, max_iters=refine_iters, convergence_tol=convergence_tol)

    refine = refine_map(scene_map, max_iters=refine_iters, convergence_tol=convergence_tol)
    return IncrementalResult(map=scene_map, registration_order=order, failed_views=failed, refine=refine)


def map_to_dict(scene_map: SceneMap) -> dict:
    """JSON-ready snapshot: poses, points, and the observation index."""
    return {
        "anchor_view_id": scene_map.anchor_view_id,
        "baseline_view_id": scene_map.baseline_view_id,
        "views": [
            {
                "view_id": v.view_id,
                "r": list(v.rotation.ravel()),
                "t": list(v.translation),
            }
            for v in scene_map.views.values()
        ],
        "tracks": [
            {
                "point": list(t.point),
                "observations": [
                    {"view_id": vid, "pixel": list(px)} for vid, px in t.observations.items()
                ],
            }
            for t in scene_map.tracks
        ],
    }
