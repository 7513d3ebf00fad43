"""Export pipeline: images -> masks, embeddings, matches -> scene manifest."""

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import ExtractorError
from .backends import build_backend
from .config import ExtractorConfig
from .ptns import write_tensor

PAD_RATIO = 0.1


@dataclass(frozen=True)
class CropChain:
    """Maps letterboxed-crop pixels back to full-image pixels.

    full = (crop_pixel - pad) / scale + bbox_origin. Recorded at crop time and
    reused verbatim so coordinates round-trip exactly.
    """

    origin_x: float
    origin_y: float
    scale: float
    pad_x: float
    pad_y: float
    content_w: float  # valid (non-padding) extent inside the letterbox
    content_h: float

    def to_full(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        x = (pts[..., 0] - self.pad_x) / self.scale + self.origin_x
        y = (pts[..., 1] - self.pad_y) / self.scale + self.origin_y
        return np.stack([x, y], axis=-1)

    def in_content(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return (
            (pts[..., 0] >= self.pad_x)
            & (pts[..., 0] <= self.pad_x + self.content_w)
            & (pts[..., 1] >= self.pad_y)
            & (pts[..., 1] <= self.pad_y + self.content_h)
        )


def load_image_gray(path: str) -> np.ndarray:
    """Image file -> float grayscale array in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float64)
    return arr / 255.0


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ExtractorError("mask is empty")
    return int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)


def letterbox_masked_crop(
    image: np.ndarray, mask: np.ndarray | None, size: int
) -> tuple[np.ndarray, CropChain]:
    """Zero the background, crop to the padded mask bbox, letterbox to size.

    With mask=None the whole image is letterboxed. The affine chain back to
    full-image pixels is returned alongside the crop.
    """
    from skimage.transform import resize

    h, w = image.shape
    if mask is None:
        x0, y0, bw, bh = 0, 0, w, h
        content = image
    else:
        x0, y0, bw, bh = mask_bbox(mask)
        pad_x = int(round(bw * PAD_RATIO))
        pad_y = int(round(bh * PAD_RATIO))
        x0, y0 = max(0, x0 - pad_x), max(0, y0 - pad_y)
        x1 = min(w, x0 + bw + 2 * pad_x)
        y1 = min(h, y0 + bh + 2 * pad_y)
        bw, bh = x1 - x0, y1 - y0
        content = (image * mask)[y0 : y0 + bh, x0 : x0 + bw]
    scale = size / max(bw, bh)
    new_w, new_h = max(1, round(bw * scale)), max(1, round(bh * scale))
    resized = resize(content, (new_h, new_w), anti_aliasing=True, preserve_range=True)
    out = np.zeros((size, size))
    pad_x_out = (size - new_w) // 2
    pad_y_out = (size - new_h) // 2
    out[pad_y_out : pad_y_out + new_h, pad_x_out : pad_x_out + new_w] = resized
    chain = CropChain(
        origin_x=float(x0),
        origin_y=float(y0),
        scale=float(new_w / bw),
        pad_x=float(pad_x_out),
        pad_y=float(pad_y_out),
        content_w=float(new_w),
        content_h=float(new_h),
    )
    return out, chain


def export_masks(image: np.ndarray, cfg: ExtractorConfig, segmenter) -> list[dict]:
    """All valid proposal masks for one image with their bounding boxes."""
    out = []
    for mask in segmenter.masks(image):
        x, y, w, h = mask_bbox(mask)
        out.append({"mask": mask.astype(np.uint8), "bbox": (float(x), float(y), float(w), float(h))})
    return out


def export_embeddings(crops: list[np.ndarray], embedder) -> list[np.ndarray]:
    return [embedder.embed(c) for c in crops]


def export_matches(crop_a, chain_a: CropChain, crop_b, chain_b: CropChain, matcher):
    """Match two letterboxed crops; returns full-image pixel arrays + confidence.

    Matches whose endpoints fall into letterbox padding on either side are
    dropped so every reported coordinate lies inside its source image.
    """
    pa, pb, conf = matcher.match(crop_a, crop_b)
    if len(pa) == 0:
        return pa, pb, conf
    keep = chain_a.in_content(pa) & chain_b.in_content(pb)
    return chain_a.to_full(pa[keep]), chain_b.to_full(pb[keep]), conf[keep]


def _intrinsics_for(w: int, h: int, cfg: ExtractorConfig) -> list[list[float]]:
    f = cfg.focal_scale * max(w, h)
    return [[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]]


def run_extraction(image_dir: str, out_dir: str, cfg: ExtractorConfig) -> str:
    """Process a directory of images into a manifest bundle; returns its path.

    The support view is cfg.prompt_image (or the first image, sorted); its
    largest mask defines the prompt. Every other view contributes mask
    proposals, per-proposal embeddings, prompt-to-proposal matchsets, and one
    support-to-view matchset from whole-image matching.
    """
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    names = sorted(
        n for n in os.listdir(image_dir) if os.path.splitext(n)[1].lower() in exts
    )
    if len(names) < 1:
        raise ExtractorError(f"no images found in {image_dir}")
    if cfg.prompt_image is not None:
        if cfg.prompt_image not in names:
            raise ExtractorError(f"prompt image {cfg.prompt_image!r} not in {image_dir}")
        names.remove(cfg.prompt_image)
        names.insert(0, cfg.prompt_image)

    segmenter = build_backend(cfg.segmenter, cfg)
    embedder = build_backend(cfg.embedder, cfg)
    matcher = build_backend(cfg.matcher, cfg)

    tensor_dir = os.path.join(out_dir, "tensors")
    os.makedirs(tensor_dir, exist_ok=True)

    def put(name: str, arr: np.ndarray) -> str:
        rel = os.path.join("tensors", name)
        write_tensor(os.path.join(out_dir, rel), arr)
        return rel

    images = {i: load_image_gray(os.path.join(image_dir, n)) for i, n in enumerate(names)}
    views = []
    for i, name in enumerate(names):
        h, w = images[i].shape
        views.append(
            {
                "view_id": i,
                "image_size": [w, h],
                "intrinsics": _intrinsics_for(w, h, cfg),
                "source_image": name,
            }
        )

    # prompt: largest mask of the support view, whole image when none found
    support = images[0]
    support_masks = export_masks(support, cfg, segmenter)
    if support_masks:
        prompt_mask = support_masks[0]["mask"]
        prompt_bbox = support_masks[0]["bbox"]
    else:
        prompt_mask = None
        h, w = support.shape
        prompt_bbox = (0.0, 0.0, float(w), float(h))
    prompt_crop, prompt_chain = letterbox_masked_crop(support, prompt_mask, cfg.crop_size)
    prompt_emb = embedder.embed(prompt_crop)
    prompts = [
        {
            "prompt_id": "prompt0",
            "view_id": 0,
            "embedding_path": put("prompt0_emb.ptns", prompt_emb),
            "bbox_px": list(prompt_bbox),
        }
    ]

    proposals = []
    matchsets = []
    for vid in range(1, len(names)):
        image = images[vid]
        for pid, entry in enumerate(export_masks(image, cfg, segmenter)):
            crop, chain = letterbox_masked_crop(image, entry["mask"], cfg.crop_size)
            emb = embedder.embed(crop)
            tag = f"v{vid}_p{pid}"
            proposals.append(
                {
                    "view_id": vid,
                    "proposal_id": pid,
                    "mask_path": put(f"{tag}_mask.ptns", entry["mask"]),
                    "embedding_path": put(f"{tag}_emb.ptns", emb),
                    "bbox_px": list(entry["bbox"]),
                }
            )
            pa, pb, conf = export_matches(prompt_crop, prompt_chain, crop, chain, matcher)
            matchsets.append(
                {
                    "view_a": vid,
                    "prompt_id": "prompt0",
                    "proposal_id": pid,
                    "points_a_path": put(f"{tag}_ma.ptns", pa.reshape(-1, 2)),
                    "points_b_path": put(f"{tag}_mb.ptns", pb.reshape(-1, 2)),
                    "confidence_path": put(f"{tag}_conf.ptns", conf),
                }
            )
        # whole-image matchset for downstream two-view pose
        full_crop, full_chain = letterbox_masked_crop(image, None, cfg.crop_size)
        pa, pb, conf = export_matches(prompt_crop, prompt_chain, full_crop, full_chain, matcher)
        tag = f"x0_{vid}"
        matchsets.append(
            {
                "view_a": 0,
                "view_b": vid,
                "points_a_path": put(f"{tag}_a.ptns", pa.reshape(-1, 2)),
                "points_b_path": put(f"{tag}_b.ptns", pb.reshape(-1, 2)),
                "confidence_path": put(f"{tag}_conf.ptns", conf),
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
