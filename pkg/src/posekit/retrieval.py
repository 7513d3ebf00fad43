"""Object retrieval: global cosine similarity plus local-match reranking.

A prompt embedding is compared against every proposal embedding with cosine
similarity; the Top-K candidates are then rescored by the fraction of their
local feature matches whose confidence clears a threshold, and the candidate
with the best fraction wins. Embeddings are L2-normalized internally so the
inner product and the cosine coincide.
"""

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateEmbeddingError


@dataclass
class MatchSet:
    """Pixel correspondences between two images with per-match confidence."""

    points_a: np.ndarray  # (n, 2) pixels in the first image
    points_b: np.ndarray  # (n, 2) pixels in the second image
    confidences: np.ndarray  # (n,) in [0, 1]

    def __post_init__(self):
        self.points_a = np.asarray(self.points_a, dtype=float).reshape(-1, 2)
        self.points_b = np.asarray(self.points_b, dtype=float).reshape(-1, 2)
        self.confidences = np.asarray(self.confidences, dtype=float).reshape(-1)
        if not (len(self.points_a) == len(self.points_b) == len(self.confidences)):
            raise ValueError("points_a, points_b and confidences must have equal length")
        if len(self.confidences) and not np.all(np.isfinite(self.confidences)):
            raise ValueError("confidences must be finite")

    def __len__(self) -> int:
        return len(self.confidences)


@dataclass
class RetrievalConfig:
    top_k: int = 3
    sigma: float = 0.9

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError("sigma must lie in [0, 1]")


@dataclass
class RetrievalResult:
    best_index: int
    similarity_row: np.ndarray  # (K,) cosine scores
    criteria_scores: list  # per proposal: float for evaluated Top-K entries, None otherwise


def normalize_embedding(e: np.ndarray) -> np.ndarray:
    """Return e scaled to unit L2 norm; zero or non-finite input is an error."""
    e = np.asarray(e, dtype=float).reshape(-1)
    if e.size < 1:
        raise DegenerateEmbeddingError("embedding must have dimension >= 1")
    if not np.all(np.isfinite(e)):
        raise DegenerateEmbeddingError("embedding has non-finite entries")
    n = np.linalg.norm(e)
    if n == 0.0:
        raise DegenerateEmbeddingError("zero embedding cannot be normalized")
    return e / n


def similarity_matrix(prompts: Sequence[np.ndarray], proposals: Sequence[np.ndarray]) -> np.ndarray:
    """Cosine similarity matrix, rows = prompts, columns = proposals."""
    if len(prompts) == 0 or len(proposals) == 0:
        raise ValueError("prompts and proposals must be non-empty")
    p = np.stack([normalize_embedding(e) for e in prompts])
    q = np.stack([normalize_embedding(e) for e in proposals])
    if p.shape[1] != q.shape[1]:
        raise ValueError(f"embedding dimension mismatch: {p.shape[1]} vs {q.shape[1]}")
    return np.clip(p @ q.T, -1.0, 1.0)


def top_k_proposals(row: np.ndarray, k: int) -> list[int]:
    """Indices of the k best similarities, descending; ties break to the
    smaller index; k larger than the row clamps to the full row."""
    if k < 1:
        raise ValueError("k must be >= 1")
    row = np.asarray(row, dtype=float).reshape(-1)
    order = np.lexsort((np.arange(len(row)), -row))
    return [int(i) for i in order[: min(k, len(row))]]


def match_confidence_criterion(matches: MatchSet, sigma: float) -> float:
    """Fraction of matches with confidence >= sigma; 0.0 for an empty set."""
    n = len(matches)
    if n == 0:
        return 0.0
    return float(np.count_nonzero(matches.confidences >= sigma)) / n


def hierarchical_retrieve(
    prompt: np.ndarray,
    proposals: Sequence[np.ndarray],
    matcher: Callable[[int], MatchSet] | None,
    cfg: RetrievalConfig,
) -> RetrievalResult:
    """Pick the best proposal for a prompt.

    Global stage: cosine similarity of the prompt against every proposal.
    Refinement stage (when `matcher` is given): the Top-K most similar
    proposals are rescored by `match_confidence_criterion` on the matches the
    matcher returns for that proposal index, and the argmax wins. Ties break
    by higher similarity, then by smaller index. A matcher failure for one
    proposal demotes that proposal's score to 0 instead of aborting. With no
    matcher the result is the plain similarity argmax.
    """
    if len(proposals) == 0:
        raise ValueError("proposals must be non-empty")
    row = similarity_matrix([prompt], proposals)[0]
    candidates = top_k_proposals(row, cfg.top_k)

    scores: list = [None] * len(proposals)
    if matcher is None:
        return RetrievalResult(best_index=candidates[0], similarity_row=row, criteria_scores=scores)

    for idx in candidates:
        try:
            scores[idx] = match_confidence_criterion(matcher(idx), cfg.sigma)
        except Exception:
            scores[idx] = 0.0

    best = max(candidates, key=lambda i: (scores[i], row[i], -i))
    return RetrievalResult(best_index=int(best), similarity_row=row, criteria_scores=scores)
