"""Exception hierarchy shared by all posekit modules."""


class PosekitError(Exception):
    """Base class for all posekit failures."""


# --- tensor / manifest I/O ---------------------------------------------------


class TensorFormatError(PosekitError):
    """A tensor file violates the PTNS binary format."""


class BadMagicError(TensorFormatError):
    """File does not start with the PTNS magic bytes."""


class UnknownDtypeError(TensorFormatError):
    """Dtype code in the header is not one of the supported codes."""


class TruncatedTensorError(TensorFormatError):
    """Declared payload size disagrees with the actual file length."""


class TensorShapeError(TensorFormatError):
    """Tensor value violates shape/dtype invariants (before writing)."""


class ManifestError(PosekitError):
    """Scene manifest is missing fields, references dangling paths, or
    violates an invariant (intrinsics, bbox bounds, ...)."""


# --- retrieval ---------------------------------------------------------------


class DegenerateEmbeddingError(PosekitError):
    """Embedding has zero norm or non-finite entries."""


# --- two-view / multi-view geometry ------------------------------------------


class GeometryError(PosekitError):
    """Base class for geometric estimation failures."""


class DegeneracyError(GeometryError):
    """Point configuration does not determine the model (rank deficiency,
    coincident points, coplanar PnP input, zero baseline)."""


class NoConsensusError(GeometryError):
    """RANSAC never found a model with enough inliers."""


class LowParallaxError(GeometryError):
    """Viewing rays are too close to parallel to triangulate."""


class CheiralityError(GeometryError):
    """Cheirality disambiguation failed (tie between candidates, or no
    candidate places points in front of both cameras)."""


class ZeroExtentError(GeometryError):
    """Projected cloud collapses to a point; no scale can be recovered."""


class MapError(PosekitError):
    """Base class for multi-view map construction failures."""


class InsufficientAssociationsError(MapError):
    """Too few 2D-3D associations to register a view."""


class DuplicateViewError(MapError):
    """View id is already registered in the map."""
