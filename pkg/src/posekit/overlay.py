"""SVG overlays: epipolar lines and match points in the target image."""

import numpy as np


def _clip_line_to_rect(line: np.ndarray, width: float, height: float):
    """Intersect the homogeneous line ax+by+c=0 with the image rectangle.

    Returns the two extreme intersection points, or None when the line misses
    the rectangle entirely.
    """
    a, b, c = line
    pts = []
    if abs(b) > 1e-12:
        for x in (0.0, width):
            y = -(a * x + c) / b
            if -1e-9 <= y <= height + 1e-9:
                pts.append((x, min(max(y, 0.0), height)))
    if abs(a) > 1e-12:
        for y in (0.0, height):
            x = -(b * y + c) / a
            if -1e-9 <= x <= width + 1e-9:
                pts.append((min(max(x, 0.0), width), y))
    if len(pts) < 2:
        return None
    arr = np.array(pts)
    d = np.linalg.norm(arr[:, None, :] - arr[None, :, :], axis=2)
    i, j = np.unravel_index(np.argmax(d), d.shape)
    if d[i, j] < 1e-9:
        return None
    return arr[i], arr[j]


def epipolar_svg(
    path: str,
    image_size: tuple[int, int],
    fundamental: np.ndarray,
    points_a: np.ndarray,
    points_b: np.ndarray,
    max_lines: int = 50,
) -> int:
    """Write an SVG of the target view: one polyline per epipolar line of the
    first `max_lines` support points, plus the matching target points.

    The epipolar line of support pixel x is F @ (x, 1). Returns the number of
    polylines written.
    """
    w, h = image_size
    points_a = np.asarray(points_a, dtype=float).reshape(-1, 2)[:max_lines]
    points_b = np.asarray(points_b, dtype=float).reshape(-1, 2)[:max_lines]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white" stroke="black"/>',
    ]
    n_lines = 0
    for pa, pb in zip(points_a, points_b):
        line = fundamental @ np.array([pa[0], pa[1], 1.0])
        seg = _clip_line_to_rect(line, w, h)
        if seg is None:
            continue
        (x1, y1), (x2, y2) = seg
        parts.append(
            f'<polyline points="{x1:.2f},{y1:.2f} {x2:.2f},{y2:.2f}" '
            f'stroke="#1f77b4" stroke-width="0.6" fill="none"/>'
        )
        parts.append(f'<circle cx="{pb[0]:.2f}" cy="{pb[1]:.2f}" r="2" fill="#d62728"/>')
        n_lines += 1
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
    return n_lines
