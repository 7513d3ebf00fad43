"""Two-view relative pose from pixel correspondences.

Pipeline: intrinsic normalization -> essential matrix by the normalized
8-point algorithm inside RANSAC (Sampson-distance scoring, adaptive stopping)
-> decomposition into the four (R, t) candidates -> cheirality selection ->
DLT triangulation. PnP (DLT + Gauss-Newton inside RANSAC) registers views
against an existing cloud, and the prompt bounding box fixes the free
translation scale. All computation is float64 and deterministic given the
RANSAC seed.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    CheiralityError,
    DegeneracyError,
    LowParallaxError,
    NoConsensusError,
    ZeroExtentError,
)
from .rotations import skew

LOW_PARALLAX_DEG = 0.1
_RANK_TOL = 1e-10


# --- domain types -------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths must be positive."""

    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, self.skew, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @classmethod
    def from_matrix(cls, k: np.ndarray) -> "CameraIntrinsics":
        k = np.asarray(k, dtype=float)
        return cls(fx=k[0, 0], fy=k[1, 1], cx=k[0, 2], cy=k[1, 2], skew=k[0, 1])

    def normalize(self, pts: np.ndarray) -> np.ndarray:
        """Map pixel coordinates to normalized camera coordinates (K^-1)."""
        pts = np.asarray(pts, dtype=float)
        y = (pts[..., 1] - self.cy) / self.fy
        x = (pts[..., 0] - self.cx - self.skew * y) / self.fx
        return np.stack([x, y], axis=-1)

    def project(self, pts_cam: np.ndarray) -> np.ndarray:
        """Project camera-frame 3D points to pixels (positive depth assumed)."""
        pts_cam = np.asarray(pts_cam, dtype=float)
        z = pts_cam[..., 2]
        x = pts_cam[..., 0] / z
        y = pts_cam[..., 1] / z
        return np.stack([self.fx * x + self.skew * y + self.cx, self.fy * y + self.cy], axis=-1)


@dataclass(frozen=True)
class EssentialMatrix:
    """3x3 rank-2 matrix with equal leading singular values, unit Frobenius norm."""

    e: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.e, dtype=float)
        if e.shape != (3, 3):
            raise ValueError("essential matrix must be 3x3")
        if abs(np.linalg.det(e)) > 1e-8:
            raise ValueError("essential matrix must be singular")
        s = np.linalg.svd(e, compute_uv=False)
        if s[0] <= 0 or abs(s[0] - s[1]) / s[0] > 1e-6:
            raise ValueError("leading singular values must be equal")
        if abs(np.linalg.norm(e) - 1.0) > 1e-9:
            raise ValueError("essential matrix must have unit Frobenius norm")
        object.__setattr__(self, "e", e)


@dataclass(frozen=True)
class RelativePose:
    """Rotation plus translation; `scaled=False` means t is a unit direction."""

    r: np.ndarray
    t: np.ndarray
    scaled: bool = False

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("rotation must be orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")
        if not self.scaled and abs(np.linalg.norm(t) - 1.0) > 1e-9:
            raise ValueError("unscaled pose requires a unit translation")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)

    def transform(self, pts: np.ndarray) -> np.ndarray:
        """World/support-frame points to this camera's frame."""
        return np.asarray(pts, dtype=float) @ self.r.T + self.t


@dataclass
class TriangulatedCloud:
    """Support-frame 3D points with the correspondence indices they came from."""

    points: np.ndarray  # (m, 3)
    indices: np.ndarray  # (m,) indices into the source correspondence arrays

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class RansacConfig:
    max_iterations: int = 2048
    inlier_threshold: float = 1e-3  # Sampson distance, normalized coordinates
    confidence: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")


@dataclass
class RansacResult:
    essential: EssentialMatrix
    inlier_mask: np.ndarray  # (n,) bool
    iterations_used: int


@dataclass
class TwoViewResult:
    pose: RelativePose  # target camera pose in the support frame, scaled=False
    cloud: TriangulatedCloud
    inlier_mask: np.ndarray
    essential: EssentialMatrix
    iterations_used: int
    points_a: np.ndarray  # (n, 2) support pixels, as given
    points_b: np.ndarray  # (n, 2) target pixels, as given


@dataclass
class PnpResult:
    pose: RelativePose  # world-to-camera, scaled=True
    inlier_mask: np.ndarray
    iterations_used: int


# --- correspondence normalization ----------------------------------------------


def normalize_correspondences(
    points_a: np.ndarray,
    points_b: np.ndarray,
    k_support: CameraIntrinsics,
    k_target: CameraIntrinsics,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply the inverse intrinsics of each camera to its pixel coordinates."""
    points_a = np.asarray(points_a, dtype=float).reshape(-1, 2)
    points_b = np.asarray(points_b, dtype=float).reshape(-1, 2)
    if len(points_a) != len(points_b):
        raise ValueError("correspondence arrays must have equal length")
    return k_support.normalize(points_a), k_target.normalize(points_b)


# --- essential matrix ----------------------------------------------------------


def _condition_points(pts: np.ndarray):
    """Hartley conditioning: centroid to origin, mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    if d < 1e-12:
        raise DegeneracyError("correspondences are (nearly) coincident")
    s = math.sqrt(2.0) / d
    t = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return (pts - c) * s, t


def _epipolar_design(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rows kron((b, 1), (a, 1)) so that row @ vec(E) == (b,1)^T E (a,1)."""
    n = len(a)
    d = np.empty((n, 9))
    d[:, 0] = b[:, 0] * a[:, 0]
    d[:, 1] = b[:, 0] * a[:, 1]
    d[:, 2] = b[:, 0]
    d[:, 3] = b[:, 1] * a[:, 0]
    d[:, 4] = b[:, 1] * a[:, 1]
    d[:, 5] = b[:, 1]
    d[:, 6] = a[:, 0]
    d[:, 7] = a[:, 1]
    d[:, 8] = 1.0
    return d


def _fix_sign(e: np.ndarray) -> np.ndarray:
    """Flip so the largest-magnitude entry (first in row-major order) is positive."""
    flat = e.ravel()
    if flat[int(np.argmax(np.abs(flat)))] < 0:
        return -e
    return e


def estimate_essential_8pt(norm_a: np.ndarray, norm_b: np.ndarray) -> EssentialMatrix:
    """Normalized 8-point solve on >= 8 normalized correspondences.

    Least-squares epipolar solution with Hartley point conditioning, projected
    to the essential manifold (singular values replaced by their top-two mean)
    and Frobenius-normalized. Raises DegeneracyError when the design matrix is
    rank deficient (coincident/degenerate configurations).
    """
    norm_a = np.asarray(norm_a, dtype=float).reshape(-1, 2)
    norm_b = np.asarray(norm_b, dtype=float).reshape(-1, 2)
    if len(norm_a) < 8 or len(norm_a) != len(norm_b):
        raise ValueError("need at least 8 paired correspondences")
    a_c, t_a = _condition_points(norm_a)
    b_c, t_b = _condition_points(norm_b)
    design = _epipolar_design(a_c, b_c)
    _, s, vt = np.linalg.svd(design)
    if s[0] <= 0 or s[7] / s[0] < _RANK_TOL:
        raise DegeneracyError("degenerate correspondence configuration")
    e = vt[-1].reshape(3, 3)
    e = t_b.T @ e @ t_a  # undo conditioning
    u, sv, vt = np.linalg.svd(e)
    m = (sv[0] + sv[1]) / 2.0
    e = u @ np.diag([m, m, 0.0]) @ vt
    e /= np.linalg.norm(e)
    return EssentialMatrix(_fix_sign(e))


def _signed_sampson_h(e: np.ndarray, ah: np.ndarray, bh: np.ndarray) -> np.ndarray:
    """Signed Sampson residuals over homogeneous (n, 3) point arrays."""
    ea = ah @ e.T  # epipolar lines of a in the target image
    etb = bh @ e  # epipolar lines of b in the support image
    num = np.einsum("ij,ij->i", bh, ea)
    den = ea[:, 0] ** 2 + ea[:, 1] ** 2 + etb[:, 0] ** 2 + etb[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = num / np.sqrt(den)
    return np.where(den > 0, d, np.inf)


def _sampson_raw(e: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sampson distances for one E over (n, 2) normalized point arrays."""
    ah = np.column_stack([a, np.ones(len(a))])
    bh = np.column_stack([b, np.ones(len(b))])
    return np.abs(_signed_sampson_h(e, ah, bh))


def sampson_distance(e: EssentialMatrix, a: np.ndarray, b: np.ndarray):
    """First-order geometric epipolar residual (classic Sampson form).

    Symmetric under the simultaneous swap (a <-> b, E <-> E^T); zero exactly
    on epipolar-consistent pairs. Accepts a single (2,) pair or (n, 2) arrays.
    """
    a = np.asarray(a, dtype=float)
    single = a.ndim == 1
    a = a.reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    d = _sampson_raw(e.e, a, b)
    return float(d[0]) if single else d


# --- RANSAC over the essential matrix -------------------------------------------


def _required_iterations(inlier_ratio: float, confidence: float, cap: int) -> int:
    w8 = inlier_ratio**8
    if w8 >= 1.0:
        return 1
    if w8 <= 0.0:
        return cap
    denom = math.log1p(-w8)
    if denom == 0.0:
        return cap
    need = math.log1p(-confidence) / denom
    return max(1, min(cap, int(math.ceil(need))))


def _batch_essential(a_sets: np.ndarray, b_sets: np.ndarray) -> np.ndarray:
    """Vectorized 8-point on (c, 8, 2) sample stacks; failed rows become NaN."""
    c = a_sets.shape[0]
    ca = a_sets.mean(axis=1, keepdims=True)
    cb = b_sets.mean(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        da = np.linalg.norm(a_sets - ca, axis=2).mean(axis=1)
        db = np.linalg.norm(b_sets - cb, axis=2).mean(axis=1)
        sa = math.sqrt(2.0) / da
        sb = math.sqrt(2.0) / db
    an = (a_sets - ca) * sa[:, None, None]
    bn = (b_sets - cb) * sb[:, None, None]
    design = np.empty((c, 8, 9))
    design[..., 0] = bn[..., 0] * an[..., 0]
    design[..., 1] = bn[..., 0] * an[..., 1]
    design[..., 2] = bn[..., 0]
    design[..., 3] = bn[..., 1] * an[..., 0]
    design[..., 4] = bn[..., 1] * an[..., 1]
    design[..., 5] = bn[..., 1]
    design[..., 6] = an[..., 0]
    design[..., 7] = an[..., 1]
    design[..., 8] = 1.0
    bad = ~np.isfinite(design).all(axis=(1, 2))
    design[bad] = np.eye(8, 9)
    ata = np.transpose(design, (0, 2, 1)) @ design
    _, vec = np.linalg.eigh(ata)
    e = vec[:, :, 0].reshape(c, 3, 3)
    # undo conditioning: T_b^T E T_a, built batched
    t_a = np.zeros((c, 3, 3))
    t_b = np.zeros((c, 3, 3))
    t_a[:, 0, 0] = sa
    t_a[:, 1, 1] = sa
    t_a[:, 2, 2] = 1.0
    t_a[:, 0, 2] = -sa * ca[:, 0, 0]
    t_a[:, 1, 2] = -sa * ca[:, 0, 1]
    t_b[:, 0, 0] = sb
    t_b[:, 1, 1] = sb
    t_b[:, 2, 2] = 1.0
    t_b[:, 0, 2] = -sb * cb[:, 0, 0]
    t_b[:, 1, 2] = -sb * cb[:, 0, 1]
    e = np.transpose(t_b, (0, 2, 1)) @ e @ t_a
    u, sv, vt = np.linalg.svd(e)
    m = (sv[:, 0] + sv[:, 1]) / 2.0
    proj = np.zeros((c, 3, 3))
    proj[:, 0, 0] = m
    proj[:, 1, 1] = m
    e = u @ proj @ vt
    with np.errstate(divide="ignore", invalid="ignore"):
        e /= np.linalg.norm(e, axis=(1, 2), keepdims=True)
    e[bad] = np.nan
    return e


def _batch_sampson(es: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sampson distances for (c, 3, 3) candidates against all n points."""
    ah = np.column_stack([a, np.ones(len(a))])
    bh = np.column_stack([b, np.ones(len(b))])
    ea = np.einsum("cij,nj->cni", es, ah)
    etb = np.einsum("cji,nj->cni", es, bh)
    num = np.einsum("ni,cni->cn", bh, ea)
    den = ea[..., 0] ** 2 + ea[..., 1] ** 2 + etb[..., 0] ** 2 + etb[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.abs(num) / np.sqrt(den)


def _decompose_raw(e: np.ndarray):
    """(R1, R2, t) from the SVD of an essential matrix, rotations proper."""
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = u[:, 2]
    return u @ w @ vt, u @ w.T @ vt, t / np.linalg.norm(t)


def _tangent_basis(t: np.ndarray):
    a = np.array([1.0, 0.0, 0.0]) if abs(t[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    q1 = np.cross(t, a)
    q1 /= np.linalg.norm(q1)
    return q1, np.cross(t, q1)


def _polish_essential(
    norm_a: np.ndarray,
    norm_b: np.ndarray,
    e_init: np.ndarray,
    threshold: float,
    outer: int = 8,
    inner: int = 10,
):
    """Robust Sampson refinement of E over its (R, unit-t) factorization.

    Outer loop: freeze Cauchy weights at the inlier scale and record the best
    consensus seen (count, then total inlier residual). Inner loop:
    Gauss-Newton on the weighted signed Sampson residuals over the 5 free
    parameters (3 rotation, 2 translation-direction). Returns the best
    (count, resid, e, mask) or None. Deterministic, derivative-free inputs.
    """
    from .rotations import so3_exp

    ah = np.column_stack([norm_a, np.ones(len(norm_a))])
    bh = np.column_stack([norm_b, np.ones(len(norm_b))])
    r1, _, t = _decompose_raw(e_init)
    r = r1
    best = None
    eps = 1e-7
    for _ in range(outer):
        e = skew(t) @ r
        e /= np.linalg.norm(e)
        d = np.abs(_signed_sampson_h(e, ah, bh))
        fin = d < threshold
        count = int(fin.sum())
        resid = float(d[fin].sum())
        if count >= 8 and (best is None or count > best[0] or (count == best[0] and resid < best[1])):
            best = (count, resid, e.copy(), fin.copy())
        sw = np.sqrt(1.0 / (1.0 + (d / threshold) ** 2))
        for _ in range(inner):
            e = skew(t) @ r
            res = _signed_sampson_h(e / np.linalg.norm(e), ah, bh) * sw
            cost = float(res @ res)
            q1, q2 = _tangent_basis(t)
            jac = np.empty((len(norm_a), 5))
            for p in range(5):
                if p < 3:
                    dv = np.zeros(3)
                    dv[p] = eps
                    r2, t2 = so3_exp(dv) @ r, t
                else:
                    t2 = t + (q1 if p == 3 else q2) * eps
                    t2 /= np.linalg.norm(t2)
                    r2 = r
                e2 = skew(t2) @ r2
                e2 /= np.linalg.norm(e2)
                jac[:, p] = (_signed_sampson_h(e2, ah, bh) * sw - res) / eps
            g = jac.T @ res
            h = jac.T @ jac + 1e-10 * np.eye(5)
            try:
                step = np.linalg.solve(h, -g)
            except np.linalg.LinAlgError:
                break
            r_new = so3_exp(step[:3]) @ r
            t_new = t + q1 * step[3] + q2 * step[4]
            t_new /= np.linalg.norm(t_new)
            e3 = skew(t_new) @ r_new
            res3 = _signed_sampson_h(e3 / np.linalg.norm(e3), ah, bh) * sw
            new_cost = float(res3 @ res3)
            if not np.isfinite(new_cost) or new_cost >= cost:
                break
            r, t = r_new, t_new
            if cost - new_cost < 1e-14 * max(cost, 1e-300):
                break
    return best


def ransac_essential(
    points_a: np.ndarray,
    points_b: np.ndarray,
    k_support: CameraIntrinsics,
    k_target: CameraIntrinsics,
    cfg: RansacConfig,
) -> RansacResult:
    """Robust essential-matrix estimate from pixel correspondences.

    Minimal 8-point hypotheses are scored by Sampson distance with the model
    order (inlier count desc, total inlier residual asc, iteration index asc);
    iteration stops adaptively once the configured confidence is reached. The
    winning hypotheses are re-estimated over their consensus via the robust
    Sampson polish plus a plain all-inlier algebraic refit, keeping whichever
    scores best. Deterministic given cfg.seed.
    """
    norm_a, norm_b = normalize_correspondences(points_a, points_b, k_support, k_target)
    n = len(norm_a)
    if n < 8:
        raise ValueError("RANSAC needs at least 8 correspondences")
    rng = np.random.default_rng(cfg.seed)

    top: list[tuple[int, float, int, np.ndarray, np.ndarray]] = []  # (count, resid, iter, e, mask)
    required = cfg.max_iterations
    completed = 0
    chunk = 32
    stop = False

    def _beats(count, resid, other):
        return count > other[0] or (count == other[0] and resid < other[1])

    while not stop:
        budget = min(required, cfg.max_iterations) - completed
        if budget <= 0:
            break
        c = min(chunk, budget)
        chunk = min(chunk * 2, 256)
        keys = rng.random((c, n))
        samples = np.argpartition(keys, 8, axis=1)[:, :8]
        es = _batch_essential(norm_a[samples], norm_b[samples])
        dists = _batch_sampson(es, norm_a, norm_b)
        with np.errstate(invalid="ignore"):
            masks = dists < cfg.inlier_threshold
        counts = masks.sum(axis=1)
        resids = np.where(masks, dists, 0.0).sum(axis=1)
        # replay sequentially so chunked evaluation matches a per-iteration loop
        for i in range(c):
            if counts[i] >= 8 and (len(top) < 3 or _beats(counts[i], resids[i], top[-1])):
                entry = (int(counts[i]), float(resids[i]), completed, es[i], masks[i].copy())
                top.append(entry)
                top.sort(key=lambda x: (-x[0], x[1], x[2]))
                del top[3:]
                required = _required_iterations(top[0][0] / n, cfg.confidence, cfg.max_iterations)
            completed += 1
            if completed >= min(required, cfg.max_iterations):
                stop = True
                break

    if not top:
        raise NoConsensusError("no 8-point hypothesis reached 8 inliers")

    best = None  # (count, resid, e, mask)
    for count, resid, _, e, mask in top:
        polished = _polish_essential(norm_a, norm_b, e, cfg.inlier_threshold)
        cand = polished if polished is not None else (count, resid, e / np.linalg.norm(e), mask)
        if best is None or _beats(cand[0], cand[1], best):
            best = cand

    # plain algebraic re-estimate on the winning consensus set; a degenerate
    # system here means the correspondences carry no epipolar geometry at all
    # (e.g. zero baseline), which is fatal rather than recoverable
    refit = estimate_essential_8pt(norm_a[best[3]], norm_b[best[3]])
    d = _sampson_raw(refit.e, norm_a, norm_b)
    refit_mask = d < cfg.inlier_threshold
    refit_count = int(refit_mask.sum())
    if refit_count >= 8 and _beats(refit_count, float(d[refit_mask].sum()), best):
        best = (refit_count, float(d[refit_mask].sum()), refit.e, refit_mask)

    essential = EssentialMatrix(_fix_sign(best[2]))
    mask = _sampson_raw(essential.e, norm_a, norm_b) < cfg.inlier_threshold
    if mask.sum() < 8:
        mask = best[3]
    return RansacResult(essential=essential, inlier_mask=mask, iterations_used=completed)


# --- decomposition, triangulation, cheirality ------------------------------------


def decompose_essential(e: EssentialMatrix) -> list[RelativePose]:
    """The four (R, t) candidates {R1, R2} x {+t, -t}, each with unit t."""
    r1, r2, t = _decompose_raw(e.e)
    return [
        RelativePose(r1, t, scaled=False),
        RelativePose(r1, -t, scaled=False),
        RelativePose(r2, t, scaled=False),
        RelativePose(r2, -t, scaled=False),
    ]


def _triangulate_batch(pose: RelativePose, norm_a: np.ndarray, norm_b: np.ndarray):
    """Linear DLT for every correspondence under one pose.

    Returns (points (n,3), parallax_deg (n,), ok (n,) bool); `ok` is False for
    rays whose line angle falls below the low-parallax cutoff or when the
    homogeneous solution degenerates.
    """
    n = len(norm_a)
    r, t = pose.r, pose.t
    # ray directions as lines in the support frame
    d1 = np.column_stack([norm_a, np.ones(n)])
    d1 /= np.linalg.norm(d1, axis=1, keepdims=True)
    d2 = np.column_stack([norm_b, np.ones(n)]) @ r  # == (R^T @ rays_b^T)^T
    d2 /= np.linalg.norm(d2, axis=1, keepdims=True)
    cosang = np.clip(np.abs(np.einsum("ij,ij->i", d1, d2)), 0.0, 1.0)
    parallax = np.degrees(np.arccos(cosang))

    p2 = np.hstack([r, t[:, None]])  # support camera is [I | 0]
    design = np.zeros((n, 4, 4))
    design[:, 0, 0] = -1.0
    design[:, 0, 2] = norm_a[:, 0]
    design[:, 1, 1] = -1.0
    design[:, 1, 2] = norm_a[:, 1]
    design[:, 2, :] = norm_b[:, 0, None] * p2[2] - p2[0]
    design[:, 3, :] = norm_b[:, 1, None] * p2[2] - p2[1]
    _, _, vt = np.linalg.svd(design)
    xh = vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        pts = xh[:, :3] / xh[:, 3, None]
    ok = (parallax >= LOW_PARALLAX_DEG) & np.isfinite(pts).all(axis=1)
    return pts, parallax, ok


def triangulate_point(pose: RelativePose, norm_a: np.ndarray, norm_b: np.ndarray) -> np.ndarray:
    """DLT triangulation of one normalized correspondence, in the support frame."""
    pts, parallax, ok = _triangulate_batch(
        pose, np.asarray(norm_a, dtype=float).reshape(1, 2), np.asarray(norm_b, dtype=float).reshape(1, 2)
    )
    if parallax[0] < LOW_PARALLAX_DEG:
        raise LowParallaxError(f"ray parallax {parallax[0]:.4f} deg below {LOW_PARALLAX_DEG} deg")
    if not ok[0]:
        raise LowParallaxError("triangulated point is at infinity")
    return pts[0]


def select_cheirality(
    candidates: list[RelativePose], norm_a: np.ndarray, norm_b: np.ndarray
) -> tuple[RelativePose, int]:
    """Pick the candidate putting the most triangulated points in front of both cameras."""
    norm_a = np.asarray(norm_a, dtype=float).reshape(-1, 2)
    norm_b = np.asarray(norm_b, dtype=float).reshape(-1, 2)
    if len(norm_a) < 1:
        raise ValueError("need at least one correspondence")
    counts = []
    for pose in candidates:
        pts, _, ok = _triangulate_batch(pose, norm_a, norm_b)
        depth_b = pts @ pose.r.T + pose.t
        counts.append(int(np.count_nonzero(ok & (pts[:, 2] > 0) & (depth_b[:, 2] > 0))))
    order = np.argsort(counts)[::-1]
    if counts[order[0]] == 0:
        raise CheiralityError("no candidate places any point in front of both cameras")
    if len(order) > 1 and counts[order[0]] == counts[order[1]]:
        raise CheiralityError("ambiguous cheirality: two candidates tie")
    return candidates[order[0]], counts[order[0]]


def two_view_pose(
    points_a: np.ndarray,
    points_b: np.ndarray,
    k_support: CameraIntrinsics,
    k_target: CameraIntrinsics,
    cfg: RansacConfig,
) -> TwoViewResult:
    """Full two-view pipeline: RANSAC essential -> decompose -> cheirality ->
    triangulate the inliers. The returned pose maps support-frame points into
    the target camera (scaled=False, unit baseline)."""
    points_a = np.asarray(points_a, dtype=float).reshape(-1, 2)
    points_b = np.asarray(points_b, dtype=float).reshape(-1, 2)
    ransac = ransac_essential(points_a, points_b, k_support, k_target, cfg)
    norm_a, norm_b = normalize_correspondences(points_a, points_b, k_support, k_target)
    inl = ransac.inlier_mask
    candidates = decompose_essential(ransac.essential)
    pose, _ = select_cheirality(candidates, norm_a[inl], norm_b[inl])

    pts, _, ok = _triangulate_batch(pose, norm_a[inl], norm_b[inl])
    depth_b = pts @ pose.r.T + pose.t
    keep = ok & (pts[:, 2] > 0) & (depth_b[:, 2] > 0)
    indices = np.flatnonzero(inl)[keep]
    cloud = TriangulatedCloud(points=pts[keep], indices=indices)
    return TwoViewResult(
        pose=pose,
        cloud=cloud,
        inlier_mask=inl,
        essential=ransac.essential,
        iterations_used=ransac.iterations_used,
        points_a=points_a,
        points_b=points_b,
    )


# --- PnP -------------------------------------------------------------------------


def _scatter_ratios(points3d: np.ndarray) -> np.ndarray:
    """Singular-value ratios of the centered 3D point cloud (for degeneracy checks)."""
    c = points3d - points3d.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s[0] <= 0:
        return np.zeros(3)
    return s / s[0]


def _pnp_dlt(points3d: np.ndarray, norm2d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Linear camera resection from >= 6 points in general position."""
    m = len(points3d)
    c3 = points3d.mean(axis=0)
    scale3 = np.linalg.norm(points3d - c3, axis=1).mean()
    if scale3 < 1e-12:
        raise DegeneracyError("coincident 3D points")
    s3 = math.sqrt(3.0) / scale3
    xc = (points3d - c3) * s3
    c2 = norm2d.mean(axis=0)
    scale2 = np.linalg.norm(norm2d - c2, axis=1).mean()
    s2 = math.sqrt(2.0) / scale2 if scale2 > 1e-12 else 1.0
    uc = (norm2d - c2) * s2

    xh = np.column_stack([xc, np.ones(m)])
    design = np.zeros((2 * m, 12))
    design[0::2, 0:4] = xh
    design[0::2, 8:12] = -uc[:, 0, None] * xh
    design[1::2, 4:8] = xh
    design[1::2, 8:12] = -uc[:, 1, None] * xh
    _, s, vt = np.linalg.svd(design)
    if s[0] <= 0 or s[10] / s[0] < 1e-9:
        raise DegeneracyError("rank-deficient resection system")
    p = vt[-1].reshape(3, 4)
    # undo both conditionings: P = T2^-1 @ P' @ T3
    t3 = np.eye(4)
    t3[:3, :3] *= s3
    t3[:3, 3] = -s3 * c3
    t2_inv = np.array([[1 / s2, 0.0, c2[0]], [0.0, 1 / s2, c2[1]], [0.0, 0.0, 1.0]])
    p = t2_inv @ p @ t3
    mtx = p[:, :3]
    if np.linalg.det(mtx) < 0:
        p = -p
        mtx = p[:, :3]
    u, sv, vt = np.linalg.svd(mtx)
    scale = sv.mean()
    if scale < 1e-12:
        raise DegeneracyError("degenerate resection scale")
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    t = p[:, 3] / scale
    return r, t


def _pnp_residuals(r: np.ndarray, t: np.ndarray, points3d: np.ndarray, norm2d: np.ndarray):
    cam = points3d @ r.T + t
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = cam[:, :2] / cam[:, 2, None]
    res = proj - norm2d
    res = np.where(np.isfinite(res), res, 1e6)
    res[cam[:, 2] <= 0] = 1e6  # points behind the camera can never be inliers
    return res


def _pnp_refine(
    r: np.ndarray, t: np.ndarray, points3d: np.ndarray, norm2d: np.ndarray, iters: int = 15
):
    """Gauss-Newton on the reprojection error over a local [omega, dt] chart."""
    from .rotations import so3_exp

    cost = float((_pnp_residuals(r, t, points3d, norm2d) ** 2).sum())
    for _ in range(iters):
        cam = points3d @ r.T + t
        z = cam[:, 2]
        if np.any(z <= 0):
            break
        inv_z = 1.0 / z
        res = cam[:, :2] * inv_z[:, None] - norm2d
        # d(proj)/d(cam)
        j_proj = np.zeros((len(cam), 2, 3))
        j_proj[:, 0, 0] = inv_z
        j_proj[:, 0, 2] = -cam[:, 0] * inv_z**2
        j_proj[:, 1, 1] = inv_z
        j_proj[:, 1, 2] = -cam[:, 1] * inv_z**2
        # d(cam)/d(omega) = -[R X]x applied to the rotated point, d(cam)/d(dt) = I
        rx = points3d @ r.T
        j_omega = np.zeros((len(cam), 3, 3))
        j_omega[:, 0, 1] = rx[:, 2]
        j_omega[:, 0, 2] = -rx[:, 1]
        j_omega[:, 1, 0] = -rx[:, 2]
        j_omega[:, 1, 2] = rx[:, 0]
        j_omega[:, 2, 0] = rx[:, 1]
        j_omega[:, 2, 1] = -rx[:, 0]
        jac = np.concatenate([j_proj @ j_omega, j_proj], axis=2).reshape(-1, 6)
        rhs = -(jac.T @ res.reshape(-1))
        h = jac.T @ jac
        try:
            step = np.linalg.solve(h + 1e-12 * np.eye(6), rhs)
        except np.linalg.LinAlgError:
            break
        r_new = so3_exp(step[:3]) @ r
        t_new = t + step[3:]
        new_cost = float((_pnp_residuals(r_new, t_new, points3d, norm2d) ** 2).sum())
        if not np.isfinite(new_cost) or new_cost > cost:
            break
        r, t, prev = r_new, t_new, cost
        cost = new_cost
        if prev - new_cost <= 1e-14 * max(prev, 1.0):
            break
    from .rotations import project_to_so3

    return project_to_so3(r), t


def pnp_solve(
    points3d: np.ndarray,
    points2d_px: np.ndarray,
    k: CameraIntrinsics,
    cfg: RansacConfig,
) -> PnpResult:
    """Absolute camera pose from 2D-3D correspondences (DLT + Gauss-Newton in RANSAC).

    Needs at least 6 pairs in general (non-coplanar) position; the inlier
    threshold is a reprojection residual in normalized image coordinates.
    """
    points3d = np.asarray(points3d, dtype=float).reshape(-1, 3)
    points2d_px = np.asarray(points2d_px, dtype=float).reshape(-1, 2)
    m = len(points3d)
    if m < 6 or m != len(points2d_px):
        raise ValueError("need at least 6 paired 2D-3D correspondences")
    ratios = _scatter_ratios(points3d)
    if ratios[1] < 1e-9:
        raise DegeneracyError("3D points are collinear")
    if ratios[2] < 1e-9:
        raise DegeneracyError("3D points are coplanar")
    norm2d = k.normalize(points2d_px)
    rng = np.random.default_rng(cfg.seed)

    best = None  # (count, resid_sum, r, t, mask)
    required = cfg.max_iterations
    completed = 0
    while completed < min(required, cfg.max_iterations):
        completed += 1
        idx = rng.choice(m, size=6, replace=False)
        if _scatter_ratios(points3d[idx])[2] < 1e-6:
            continue  # coplanar minimal sample carries a projective ambiguity
        try:
            r, t = _pnp_dlt(points3d[idx], norm2d[idx])
        except DegeneracyError:
            continue
        dist = np.linalg.norm(_pnp_residuals(r, t, points3d, norm2d), axis=1)
        mask = dist < cfg.inlier_threshold
        count = int(mask.sum())
        if count < 6:
            continue
        resid = float(dist[mask].sum())
        if best is None or count > best[0] or (count == best[0] and resid < best[1]):
            # local optimization: polish the hypothesis on its consensus so the
            # adaptive stop sees the true inlier ratio, not the crude DLT's
            r2, t2 = _pnp_refine(r, t, points3d[mask], norm2d[mask], iters=5)
            dist2 = np.linalg.norm(_pnp_residuals(r2, t2, points3d, norm2d), axis=1)
            mask2 = dist2 < cfg.inlier_threshold
            if mask2.sum() >= count:
                r, t, mask = r2, t2, mask2
                count = int(mask2.sum())
                resid = float(dist2[mask2].sum())
            best = (count, resid, r, t, mask.copy())
            w6 = (count / m) ** 6
            if w6 >= 1.0:
                required = 1
            elif w6 > 0.0:
                required = max(
                    1,
                    min(
                        cfg.max_iterations,
                        int(math.ceil(math.log1p(-cfg.confidence) / math.log1p(-w6))),
                    ),
                )

    if best is None:
        raise NoConsensusError("no PnP hypothesis reached 6 inliers")
    _, _, r, t, mask = best
    try:
        r0, t0 = _pnp_dlt(points3d[mask], norm2d[mask])
    except DegeneracyError:
        r0, t0 = r, t
    r, t = _pnp_refine(r0, t0, points3d[mask], norm2d[mask])
    dist = np.linalg.norm(_pnp_residuals(r, t, points3d, norm2d), axis=1)
    final_mask = dist < cfg.inlier_threshold
    if final_mask.sum() >= 6:
        r, t = _pnp_refine(r, t, points3d[final_mask], norm2d[final_mask])
        mask = final_mask
    pose = RelativePose(r, t, scaled=True)
    return PnpResult(pose=pose, inlier_mask=mask, iterations_used=completed)


# --- scale recovery and metrics -----------------------------------------------


def recover_translation_scale(
    pose: RelativePose,
    cloud: TriangulatedCloud,
    prompt_bbox_px: tuple[float, float, float, float],
    k_support: CameraIntrinsics,
) -> RelativePose:
    """Fix the free translation scale from the prompt bounding box.

    The cloud's projected axis-aligned bounding box in the support view is
    compared against the prompt box: scale = projected diagonal / prompt
    diagonal, applied to the translation (a larger prompt box means a closer,
    hence smaller-scale, object).
    """
    if pose.scaled:
        raise ValueError("pose is already scaled")
    if len(cloud) == 0:
        raise ZeroExtentError("empty cloud cannot fix a scale")
    _, _, w, h = prompt_bbox_px
    if w <= 0 or h <= 0:
        raise ValueError("prompt bbox must have positive extent")
    px = k_support.project(cloud.points)
    span = px.max(axis=0) - px.min(axis=0)
    diag = float(np.hypot(span[0], span[1]))
    if diag < 1e-9:
        raise ZeroExtentError("cloud projects to a single point")
    scale = diag / float(np.hypot(w, h))
    return RelativePose(pose.r, pose.t * scale, scaled=True)


def rotation_geodesic_error(r_est: np.ndarray, r_gt: np.ndarray) -> float:
    """Geodesic rotation error in degrees: arccos((trace(Rgt^T Rest) - 1) / 2)."""
    r_est = RelativePose(r_est, np.zeros(3), scaled=True).r
    r_gt = RelativePose(r_gt, np.zeros(3), scaled=True).r
    c = (np.trace(r_gt.T @ r_est) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
