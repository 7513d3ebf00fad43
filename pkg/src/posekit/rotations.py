"""SO(3) helpers: skew matrices, exponential/log maps, axis-angle construction."""

import numpy as np


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v]x such that skew(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_rotation(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rotation about `axis` (need not be unit) by `angle_rad`, via Rodrigues."""
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("rotation axis must be non-zero")
    k = skew(axis / n)
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Exponential map: 3-vector rotation increment -> rotation matrix."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        # second-order series keeps accepted LM micro-steps exact enough
        k = skew(omega)
        return np.eye(3) + k + 0.5 * (k @ k)
    return axis_angle_rotation(omega, theta)


def so3_log(r: np.ndarray) -> np.ndarray:
    """Log map: rotation matrix -> 3-vector (axis * angle)."""
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-12:
        return np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    if theta > np.pi - 1e-6:
        # near pi the off-diagonal form degrades; use the symmetric part
        a = (r + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(a), 0.0))
        # fix signs from the largest component
        i = int(np.argmax(axis))
        if axis[i] > 0.0:
            sign_row = a[i] / axis[i]
            axis = np.where(np.arange(3) == i, axis, sign_row)
        return axis / np.linalg.norm(axis) * theta
    v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return v * (theta / (2.0 * np.sin(theta)))


def project_to_so3(m: np.ndarray) -> np.ndarray:
    """Closest rotation matrix in Frobenius norm (via SVD, det +1 enforced)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


def random_rotation(rng: np.random.Generator, max_angle_rad: float = np.pi) -> np.ndarray:
    """Uniform random axis, angle uniform in (0, max_angle_rad]."""
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-8:
        axis = rng.normal(size=3)
    angle = rng.uniform(0.0, max_angle_rad)
    return axis_angle_rotation(axis, angle)


def geodesic_angle_deg(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """High-resolution geodesic angle between two rotations, in degrees.

    Uses the chord formula ||Ra - Rb||_F = 2*sqrt(2)*sin(theta/2), which stays
    accurate down to ~1e-13 degrees where the arccos-of-trace form bottoms out
    near 2e-6 degrees in float64.
    """
    d = np.linalg.norm(np.asarray(r_a, dtype=float) - np.asarray(r_b, dtype=float))
    s = np.clip(d / (2.0 * np.sqrt(2.0)), -1.0, 1.0)
    return float(np.degrees(2.0 * np.arcsin(s)))


def vector_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    """Angle between two 3-vectors in degrees (atan2 form, stable near 0/180)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    cross = np.linalg.norm(np.cross(a, b))
    dot = float(a @ b)
    return float(np.degrees(np.arctan2(cross, dot)))
