"""Model backends filling the segmentation / embedding / matching roles.

The builtin backends are deterministic classical implementations with no
checkpoint downloads: watershed over a dense seed lattice for automatic mask
proposals, grid gradient-orientation histograms for global embeddings, and
windowed zero-normalized cross-correlation for dense matching. Identifiers
that do not resolve raise ModelLoadError, mirroring a failed checkpoint load.
"""

import numpy as np
from scipy import ndimage
from skimage.segmentation import watershed

from . import ModelLoadError
from .config import ExtractorConfig


class WatershedSegmenter:
    """Automatic mask proposals: watershed flooded from a uniform seed grid."""

    def __init__(self, cfg: ExtractorConfig):
        self.grid = cfg.grid_points_per_axis
        self.min_area_fraction = cfg.min_mask_area_fraction
        self.max_proposals = cfg.max_proposals

    def masks(self, image: np.ndarray) -> list[np.ndarray]:
        h, w = image.shape
        grad = np.hypot(ndimage.sobel(image, axis=0), ndimage.sobel(image, axis=1))
        markers = np.zeros((h, w), dtype=np.int32)
        ys = np.linspace(0, h - 1, self.grid).round().astype(int)
        xs = np.linspace(0, w - 1, self.grid).round().astype(int)
        label = 1
        for y in ys:
            for x in xs:
                markers[y, x] = label
                label += 1
        segmented = watershed(grad, markers)
        min_area = max(1, int(self.min_area_fraction * h * w))
        out = []
        labels, counts = np.unique(segmented, return_counts=True)
        order = np.argsort(-counts)
        for idx in order:
            if counts[idx] < min_area:
                continue
            mask = (segmented == labels[idx]).astype(np.uint8)
            out.append(mask)
            if len(out) == self.max_proposals:
                break
        return out


class GridHogEmbedder:
    """Global descriptor: 4x4 orientation histograms + 4x4 mean intensities."""

    CELLS = 4
    BINS = 8

    def __init__(self, cfg: ExtractorConfig):
        self.size = cfg.crop_size

    @property
    def token_width(self) -> int:
        return self.CELLS * self.CELLS * self.BINS + self.CELLS * self.CELLS + 1

    def embed(self, crop: np.ndarray) -> np.ndarray:
        s = crop.shape[0]
        gx = ndimage.sobel(crop, axis=1)
        gy = ndimage.sobel(crop, axis=0)
        mag = np.hypot(gx, gy)
        ori = np.mod(np.arctan2(gy, gx), np.pi)  # unsigned orientation
        cell = s // self.CELLS
        feats = []
        for cy in range(self.CELLS):
            for cx in range(self.CELLS):
                sl = np.s_[cy * cell : (cy + 1) * cell, cx * cell : (cx + 1) * cell]
                hist, _ = np.histogram(
                    ori[sl], bins=self.BINS, range=(0.0, np.pi), weights=mag[sl]
                )
                feats.append(hist)
        hog = np.concatenate(feats)
        norm = np.linalg.norm(hog)
        if norm > 0:
            hog = hog / norm
        means = np.array(
            [
                crop[cy * cell : (cy + 1) * cell, cx * cell : (cx + 1) * cell].mean()
                for cy in range(self.CELLS)
                for cx in range(self.CELLS)
            ]
        )
        vec = np.concatenate([hog, means, [1.0]])  # bias keeps the norm positive
        return vec / np.linalg.norm(vec)


class ZnccMatcher:
    """Dense grid matching by windowed zero-normalized cross-correlation."""

    def __init__(self, cfg: ExtractorConfig):
        self.patch = cfg.match_patch
        self.radius = cfg.match_search_radius
        self.grid_step = max(4, cfg.crop_size // 16)

    def match(self, crop_a: np.ndarray, crop_b: np.ndarray):
        """Returns (points_a, points_b, confidences) in crop pixel coordinates."""
        s = crop_a.shape[0]
        half = self.patch // 2
        rad = self.radius
        pts_a, pts_b, confs = [], [], []
        lo = half + rad
        hi = s - half - rad - 1
        if hi <= lo:
            return np.empty((0, 2)), np.empty((0, 2)), np.empty(0)
        coords = np.arange(lo, hi, self.grid_step)
        for ya in coords:
            for xa in coords:
                patch = crop_a[ya - half : ya + half + 1, xa - half : xa + half + 1]
                p_std = patch.std()
                if p_std < 1e-6:
                    continue  # textureless patch carries no signal
                p_norm = (patch - patch.mean()) / p_std
                region = crop_b[
                    ya - half - rad : ya + half + rad + 1, xa - half - rad : xa + half + rad + 1
                ]
                windows = np.lib.stride_tricks.sliding_window_view(
                    region, (self.patch, self.patch)
                )
                w_mean = windows.mean(axis=(2, 3), keepdims=True)
                w_std = windows.std(axis=(2, 3))
                safe = np.maximum(w_std, 1e-6)
                scores = ((windows - w_mean) * p_norm).mean(axis=(2, 3)) / safe
                scores[w_std < 1e-6] = -1.0
                iy, ix = np.unravel_index(np.argmax(scores), scores.shape)
                pts_a.append((xa, ya))
                pts_b.append((xa - rad + ix, ya - rad + iy))
                confs.append(float(np.clip((scores[iy, ix] + 1.0) / 2.0, 0.0, 1.0)))
        if not pts_a:
            return np.empty((0, 2)), np.empty((0, 2)), np.empty(0)
        return (
            np.array(pts_a, dtype=float),
            np.array(pts_b, dtype=float),
            np.array(confs),
        )


_REGISTRY = {
    "builtin:watershed": WatershedSegmenter,
    "builtin:grid-hog": GridHogEmbedder,
    "builtin:zncc": ZnccMatcher,
}


def build_backend(identifier: str, cfg: ExtractorConfig):
    try:
        factory = _REGISTRY[identifier]
    except KeyError:
        raise ModelLoadError(
            f"cannot load model {identifier!r}: not a builtin backend and no "
            f"checkpoint loader is configured"
        ) from None
    return factory(cfg)
