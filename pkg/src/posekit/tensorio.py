"""PTNS tensor files and the JSON scene manifest.

PTNS is a minimal little-endian container for row-major numeric buffers:

    magic   4 bytes  b"PTNS"
    version u32      currently 1
    dtype   u8       0=f32  1=f64  2=u8  3=i64
    ndim    u8       at most 8
    dims    ndim*u64
    payload prod(dims) * itemsize bytes

The manifest is a JSON document (``"version": 1``) describing views
(intrinsics, image size, optional ground-truth pose), prompts, per-view mask
proposals, and matchsets; all tensor paths are relative to the manifest's
directory so a scene bundle can be relocated as a unit.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    ManifestError,
    TensorShapeError,
    TruncatedTensorError,
    UnknownDtypeError,
)

MAGIC = b"PTNS"
FORMAT_VERSION = 1
MAX_NDIM = 8

# dtype code <-> numpy dtype (fixed little-endian on disk)
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_KIND_TO_CODE = {"f4": 0, "f8": 1, "u1": 2, "i8": 3}

_HEADER = struct.Struct("<4sIBB")


def _dtype_code(arr: np.ndarray) -> int:
    key = arr.dtype.str.lstrip("<>|=")
    if key not in _KIND_TO_CODE:
        raise TensorShapeError(f"unsupported dtype {arr.dtype}; use f32, f64, u8 or i64")
    return _KIND_TO_CODE[key]


def write_tensor(path: str, tensor: np.ndarray) -> None:
    """Write `tensor` to `path` in PTNS format.

    Accepts f32/f64/u8/i64 arrays with up to 8 dimensions; data is stored
    row-major little-endian so a write/read round trip is bit exact.
    """
    arr = np.ascontiguousarray(tensor)
    code = _dtype_code(arr)
    if np.asarray(tensor).ndim == 0:
        raise TensorShapeError("scalar tensors are not supported; reshape to (1,)")
    if arr.ndim > MAX_NDIM:
        raise TensorShapeError(f"tensor has {arr.ndim} dims, limit is {MAX_NDIM}")
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path: str) -> np.ndarray:
    """Read a PTNS file back into a numpy array (exact inverse of write_tensor)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return _decode(blob, path)


def _decode(blob: bytes, path: str) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise TruncatedTensorError(f"{path}: file shorter than header")
    magic, version, code, ndim = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise TensorShapeError(f"{path}: unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
    if ndim > MAX_NDIM:
        raise TensorShapeError(f"{path}: ndim {ndim} exceeds limit {MAX_NDIM}")
    dims_end = _HEADER.size + 8 * ndim
    if len(blob) < dims_end:
        raise TruncatedTensorError(f"{path}: truncated dimension table")
    shape = struct.unpack_from(f"<{ndim}Q", blob, _HEADER.size)
    dtype = _CODE_TO_DTYPE[code]
    count = 1
    for s in shape:
        count *= s
    expected = dims_end + count * dtype.itemsize
    if len(blob) != expected:
        raise TruncatedTensorError(
            f"{path}: payload is {len(blob) - dims_end} bytes, header declares {expected - dims_end}"
        )
    arr = np.frombuffer(blob[dims_end:], dtype=dtype).reshape(shape)
    return arr.copy()


def validate_tensor_file(path: str) -> tuple[int, tuple[int, ...]]:
    """Cheap header+length validation; returns (dtype_code, shape).

    Reads only the header and compares the declared payload size against the
    file length, so manifests with large tensors can be validated eagerly
    without materializing every buffer.
    """
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size + 8 * MAX_NDIM)
    if len(head) < _HEADER.size:
        raise TruncatedTensorError(f"{path}: file shorter than header")
    magic, version, code, ndim = _HEADER.unpack_from(head)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise TensorShapeError(f"{path}: unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
    if ndim > MAX_NDIM:
        raise TensorShapeError(f"{path}: ndim {ndim} exceeds limit {MAX_NDIM}")
    if len(head) < _HEADER.size + 8 * ndim:
        raise TruncatedTensorError(f"{path}: truncated dimension table")
    shape = struct.unpack_from(f"<{ndim}Q", head, _HEADER.size)
    count = 1
    for s in shape:
        count *= s
    expected = _HEADER.size + 8 * ndim + count * _CODE_TO_DTYPE[code].itemsize
    if size != expected:
        raise TruncatedTensorError(f"{path}: file is {size} bytes, format requires {expected}")
    return code, tuple(int(s) for s in shape)


# --- scene manifest -----------------------------------------------------------


@dataclass(frozen=True)
class ViewSpec:
    view_id: int
    image_size: tuple[int, int]  # (width, height) pixels
    intrinsics: np.ndarray  # 3x3 K
    gt_pose: tuple[np.ndarray, np.ndarray] | None = None  # (R 3x3, t 3), world-to-camera


@dataclass(frozen=True)
class PromptSpec:
    prompt_id: str
    view_id: int  # support view the bbox refers to
    embedding_path: str
    bbox_px: tuple[float, float, float, float]  # (x, y, w, h)
    gt_proposal: int | None = None


@dataclass(frozen=True)
class ProposalSpec:
    view_id: int
    proposal_id: int
    mask_path: str
    embedding_path: str
    bbox_px: tuple[float, float, float, float]


@dataclass(frozen=True)
class MatchSetRef:
    view_a: int
    view_b: int | None
    prompt_id: str | None
    proposal_id: int | None
    points_a_path: str
    points_b_path: str
    confidence_path: str
    gt_inliers_path: str | None = None


@dataclass
class SceneManifest:
    root: str  # directory all relative paths resolve against
    views: list[ViewSpec]
    prompts: list[PromptSpec] = field(default_factory=list)
    proposals: list[ProposalSpec] = field(default_factory=list)
    matchsets: list[MatchSetRef] = field(default_factory=list)

    def resolve(self, rel_path: str) -> str:
        return os.path.join(self.root, rel_path)

    def view(self, view_id: int) -> ViewSpec:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise ManifestError(f"unknown view id {view_id}")

    def prompt(self, prompt_id: str) -> PromptSpec:
        for p in self.prompts:
            if p.prompt_id == prompt_id:
                return p
        raise ManifestError(f"unknown prompt {prompt_id!r}")

    def proposals_for_view(self, view_id: int) -> list[ProposalSpec]:
        return [p for p in self.proposals if p.view_id == view_id]

    def find_matchset(self, view_a: int, view_b: int) -> MatchSetRef:
        for m in self.matchsets:
            if m.view_b is None:
                continue
            if (m.view_a, m.view_b) == (view_a, view_b) or (m.view_a, m.view_b) == (view_b, view_a):
                return m
        raise ManifestError(f"no matchset between views {view_a} and {view_b}")

    def prompt_matchset(self, prompt_id: str, proposal_id: int) -> MatchSetRef:
        for m in self.matchsets:
            if m.prompt_id == prompt_id and m.proposal_id == proposal_id:
                return m
        raise ManifestError(f"no matchset for prompt {prompt_id!r} / proposal {proposal_id}")

    def load_tensor(self, rel_path: str) -> np.ndarray:
        return read_tensor(self.resolve(rel_path))

    def matchset_arrays(self, ref: MatchSetRef):
        """Load (points_a, points_b, confidences, gt_inliers|None) for a matchset."""
        pa = self.load_tensor(ref.points_a_path).astype(float)
        pb = self.load_tensor(ref.points_b_path).astype(float)
        conf = self.load_tensor(ref.confidence_path).astype(float)
        gt = None
        if ref.gt_inliers_path is not None:
            gt = self.load_tensor(ref.gt_inliers_path).astype(bool)
        return pa, pb, conf, gt


def _require(obj: dict, key: str, ctx: str):
    if key not in obj:
        raise ManifestError(f"{ctx}: missing field {key!r}")
    return obj[key]


def _check_bbox(bbox, image_size, ctx: str) -> tuple[float, float, float, float]:
    if len(bbox) != 4:
        raise ManifestError(f"{ctx}: bbox_px must be [x, y, w, h]")
    x, y, w, h = (float(v) for v in bbox)
    iw, ih = image_size
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > iw or y + h > ih:
        raise ManifestError(f"{ctx}: bbox {bbox} outside image bounds {image_size}")
    return (x, y, w, h)


def _check_intrinsics(k: np.ndarray, ctx: str) -> np.ndarray:
    if k.shape != (3, 3):
        raise ManifestError(f"{ctx}: intrinsics must be 3x3")
    if not (k[0, 0] > 0 and k[1, 1] > 0):
        raise ManifestError(f"{ctx}: focal entries must be positive")
    if not np.array_equal(k[2], [0.0, 0.0, 1.0]):
        raise ManifestError(f"{ctx}: bottom intrinsics row must be (0, 0, 1)")
    return k


def _check_tensor_path(root: str, rel_path: str, ctx: str) -> str:
    full = os.path.join(root, rel_path)
    if not os.path.isfile(full):
        raise ManifestError(f"{ctx}: dangling tensor path {rel_path!r}")
    try:
        validate_tensor_file(full)
    except Exception as exc:  # surface the underlying format failure
        raise ManifestError(f"{ctx}: invalid tensor {rel_path!r}: {exc}") from exc
    return rel_path


def load_manifest(path: str) -> SceneManifest:
    """Load and eagerly validate a scene manifest.

    Every referenced tensor path must exist and carry a well-formed PTNS
    header whose declared payload matches the file length; intrinsics and
    bounding boxes are validated against their view.
    """
    if not os.path.isfile(path):
        raise ManifestError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: invalid JSON: {exc}") from exc
    if doc.get("version") != 1:
        raise ManifestError(f"{path}: manifest version must be 1")
    root = os.path.dirname(os.path.abspath(path))

    views = []
    seen_ids = set()
    for i, v in enumerate(_require(doc, "views", path)):
        ctx = f"{path}: views[{i}]"
        vid = int(_require(v, "view_id", ctx))
        if vid in seen_ids:
            raise ManifestError(f"{ctx}: duplicate view_id {vid}")
        seen_ids.add(vid)
        size = _require(v, "image_size", ctx)
        if len(size) != 2 or size[0] <= 0 or size[1] <= 0:
            raise ManifestError(f"{ctx}: image_size must be [w, h] positive")
        k = _check_intrinsics(np.asarray(_require(v, "intrinsics", ctx), dtype=float), ctx)
        gt = None
        if v.get("gt_pose") is not None:
            g = v["gt_pose"]
            r = np.asarray(_require(g, "r", ctx), dtype=float).reshape(3, 3)
            t = np.asarray(_require(g, "t", ctx), dtype=float).reshape(3)
            gt = (r, t)
        views.append(ViewSpec(vid, (int(size[0]), int(size[1])), k, gt))
    if not views:
        raise ManifestError(f"{path}: manifest needs at least one view")
    by_id = {v.view_id: v for v in views}

    prompts = []
    for i, p in enumerate(doc.get("prompts", [])):
        ctx = f"{path}: prompts[{i}]"
        pid = str(_require(p, "prompt_id", ctx))
        vid = int(_require(p, "view_id", ctx))
        if vid not in by_id:
            raise ManifestError(f"{ctx}: unknown view_id {vid}")
        emb = _check_tensor_path(root, _require(p, "embedding_path", ctx), ctx)
        bbox = _check_bbox(_require(p, "bbox_px", ctx), by_id[vid].image_size, ctx)
        gt_prop = p.get("gt_proposal")
        prompts.append(PromptSpec(pid, vid, emb, bbox, None if gt_prop is None else int(gt_prop)))

    proposals = []
    for i, p in enumerate(doc.get("proposals", [])):
        ctx = f"{path}: proposals[{i}]"
        vid = int(_require(p, "view_id", ctx))
        if vid not in by_id:
            raise ManifestError(f"{ctx}: unknown view_id {vid}")
        mask = _check_tensor_path(root, _require(p, "mask_path", ctx), ctx)
        emb = _check_tensor_path(root, _require(p, "embedding_path", ctx), ctx)
        bbox = _check_bbox(_require(p, "bbox_px", ctx), by_id[vid].image_size, ctx)
        proposals.append(ProposalSpec(vid, int(_require(p, "proposal_id", ctx)), mask, emb, bbox))

    matchsets = []
    for i, m in enumerate(doc.get("matchsets", [])):
        ctx = f"{path}: matchsets[{i}]"
        va = int(_require(m, "view_a", ctx))
        if va not in by_id:
            raise ManifestError(f"{ctx}: unknown view_a {va}")
        vb = m.get("view_b")
        pid = m.get("prompt_id")
        if (vb is None) == (pid is None):
            raise ManifestError(f"{ctx}: exactly one of view_b / prompt_id required")
        prop = m.get("proposal_id")
        if vb is not None:
            vb = int(vb)
            if vb not in by_id:
                raise ManifestError(f"{ctx}: unknown view_b {vb}")
        else:
            if not any(p.prompt_id == pid for p in prompts):
                raise ManifestError(f"{ctx}: unknown prompt_id {pid!r}")
            if prop is None:
                raise ManifestError(f"{ctx}: prompt matchset requires proposal_id")
            prop = int(prop)
        pa = _check_tensor_path(root, _require(m, "points_a_path", ctx), ctx)
        pb = _check_tensor_path(root, _require(m, "points_b_path", ctx), ctx)
        conf = _check_tensor_path(root, _require(m, "confidence_path", ctx), ctx)
        gt = m.get("gt_inliers_path")
        if gt is not None:
            gt = _check_tensor_path(root, gt, ctx)
        matchsets.append(MatchSetRef(va, vb, pid, prop, pa, pb, conf, gt))

    return SceneManifest(root, views, prompts, proposals, matchsets)
