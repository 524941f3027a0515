"""Ranking metrics for query/gallery retrieval: mAP, CMC and mINP.

Galleries are ranked by ascending distance with a stable sort, so ties keep
gallery index order. A query's matches are the valid gallery entries sharing
its person id; INP is ``n_matches / rank_of_hardest_match``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .const import (
    DEFAULT_MAX_RANK,
    DISTANCE_COSINE,
    DISTANCE_EUCLIDEAN,
    PROTOCOL_REGDB,
    PROTOCOL_SINGLE,
    PROTOCOL_SYSU,
)
from .errors import (
    AllQueriesSkippedError,
    NonFiniteError,
    NoValidMatchError,
    UsageError,
    ZeroVarianceError,
)

_LOGGER = logging.getLogger(__name__)

PROTOCOLS = (PROTOCOL_SINGLE, PROTOCOL_REGDB, PROTOCOL_SYSU)


@dataclass(frozen=True)
class ImageMeta:
    person_id: int
    camera_id: int
    image_id: int = 0
    junk: bool = False

    def __post_init__(self) -> None:
        if self.person_id < 0 or self.camera_id < 0:
            raise UsageError(
                f"person_id and camera_id must be nonnegative, got "
                f"({self.person_id}, {self.camera_id})"
            )


QueryMeta = ImageMeta
GalleryMeta = ImageMeta


@dataclass(frozen=True)
class GalleryArrays:
    """Column view of a gallery, built once per evaluation."""

    person_ids: np.ndarray
    camera_ids: np.ndarray
    junk: np.ndarray

    @classmethod
    def from_meta(cls, gallery: Sequence[ImageMeta]) -> "GalleryArrays":
        return cls(
            np.fromiter((g.person_id for g in gallery), dtype=np.int64, count=len(gallery)),
            np.fromiter((g.camera_id for g in gallery), dtype=np.int64, count=len(gallery)),
            np.fromiter((g.junk for g in gallery), dtype=bool, count=len(gallery)),
        )


def _mask(q: ImageMeta, g: GalleryArrays, protocol: str) -> np.ndarray:
    if protocol == PROTOCOL_SINGLE:
        invalid = (g.person_ids == q.person_id) & (g.camera_ids == q.camera_id)
    elif protocol == PROTOCOL_REGDB:
        invalid = np.zeros(g.junk.shape, dtype=bool)
    elif protocol == PROTOCOL_SYSU:
        # indoor infrared camera 3 and RGB camera 2 share a room
        invalid = (g.camera_ids == 2) & (q.camera_id == 3)
    else:
        raise UsageError(f"Unknown protocol {protocol!r}, expected one of {PROTOCOLS}")
    return ~(invalid | g.junk)


def valid_mask(
    q: ImageMeta, gallery: Sequence[ImageMeta], protocol: str = PROTOCOL_SINGLE
) -> np.ndarray:
    """Boolean mask of the gallery entries that count for query ``q``."""
    return _mask(q, GalleryArrays.from_meta(gallery), protocol)


@dataclass(frozen=True)
class QueryEvaluation:
    ap: float
    inp: float
    first_match_rank: int
    n_matches: int
    hardest_rank: int

    @property
    def negative_penalty(self) -> float:
        """Negative penalty, the share of the top ``hardest_rank`` that are not matches."""
        return (self.hardest_rank - self.n_matches) / self.hardest_rank

    @property
    def inp_exact(self) -> Fraction:
        return Fraction(self.n_matches, self.hardest_rank)

    @property
    def np_exact(self) -> Fraction:
        return Fraction(self.hardest_rank - self.n_matches, self.hardest_rank)


def evaluate_query(
    distances: Sequence[float],
    relevance: Sequence[bool],
    valid: Optional[Sequence[bool]] = None,
) -> QueryEvaluation:
    """Score one query. ``relevance`` marks same-identity gallery entries and
    ``valid`` (default all) removes entries from the ranking entirely."""
    dist = np.asarray(distances, dtype=np.float64)
    rel = np.asarray(relevance, dtype=bool)
    if dist.shape != rel.shape or dist.ndim != 1:
        raise UsageError(
            f"distances and relevance must be equal-length vectors, got "
            f"{dist.shape} and {rel.shape}"
        )
    order = np.argsort(dist, kind="stable")
    ranked = rel[order]
    if valid is not None:
        keep = np.asarray(valid, dtype=bool)
        if keep.shape != rel.shape:
            raise UsageError(f"valid mask has shape {keep.shape}, expected {rel.shape}")
        ranked = ranked[keep[order]]
    hit_ranks = np.flatnonzero(ranked) + 1
    n_matches = int(hit_ranks.size)
    if n_matches == 0:
        raise NoValidMatchError("query has no valid match in the gallery")
    precisions = np.arange(1, n_matches + 1, dtype=np.float64) / hit_ranks
    hardest = int(hit_ranks[-1])
    return QueryEvaluation(
        ap=math.fsum(precisions.tolist()) / n_matches,
        inp=n_matches / hardest,
        first_match_rank=int(hit_ranks[0]),
        n_matches=n_matches,
        hardest_rank=hardest,
    )


@dataclass(frozen=True)
class MetricSummary:
    mAP: float
    mINP: float
    cmc: Tuple[float, ...]
    n_valid: int
    skipped: Tuple[int, ...] = ()
    per_query: Tuple[QueryEvaluation, ...] = field(default=(), repr=False, compare=False)

    def rank(self, k: int) -> float:
        if not 1 <= k <= len(self.cmc):
            raise UsageError(f"rank {k} outside the computed CMC range 1..{len(self.cmc)}")
        return self.cmc[k - 1]

    def as_dict(self, ranks: Sequence[int] = (1, 5, 10)) -> dict:
        out = {"mAP": self.mAP, "mINP": self.mINP}
        for k in ranks:
            if k <= len(self.cmc):
                out[f"rank{k}"] = self.cmc[k - 1]
        return out


def evaluate(
    dist: np.ndarray,
    qmeta: Sequence[ImageMeta],
    gmeta: Sequence[ImageMeta],
    K: int = DEFAULT_MAX_RANK,
    *,
    protocol: str = PROTOCOL_SINGLE,
    workers: int = 1,
) -> MetricSummary:
    """Evaluate a ``len(qmeta) x len(gmeta)`` distance matrix.

    Queries without a valid match are skipped and listed in ``skipped``.
    Per-query results are reduced in query order whatever ``workers`` is.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape != (len(qmeta), len(gmeta)):
        raise UsageError(
            f"distance matrix is {dist.shape}, expected ({len(qmeta)}, {len(gmeta)})"
        )
    if not np.isfinite(dist).all():
        raise NonFiniteError("distance matrix contains non-finite values")
    if K < 1:
        raise UsageError(f"K must be >= 1, got {K}")
    if protocol not in PROTOCOLS:
        raise UsageError(f"Unknown protocol {protocol!r}, expected one of {PROTOCOLS}")
    gallery = GalleryArrays.from_meta(gmeta)

    def score(index: int) -> Optional[QueryEvaluation]:
        q = qmeta[index]
        try:
            return evaluate_query(
                dist[index], gallery.person_ids == q.person_id, _mask(q, gallery, protocol)
            )
        except NoValidMatchError:
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results: List[Optional[QueryEvaluation]] = list(pool.map(score, range(len(qmeta))))
    else:
        results = [score(i) for i in range(len(qmeta))]

    kept = [r for r in results if r is not None]
    skipped = tuple(i for i, r in enumerate(results) if r is None)
    if not kept:
        raise AllQueriesSkippedError(len(qmeta))
    if skipped:
        _LOGGER.warning("%s of %s queries have no valid match", len(skipped), len(qmeta))
    n = len(kept)
    firsts = np.fromiter((r.first_match_rank for r in kept), dtype=np.int64, count=n)
    cmc = tuple(float(np.count_nonzero(firsts <= k)) / n for k in range(1, K + 1))
    return MetricSummary(
        mAP=math.fsum(r.ap for r in kept) / n,
        mINP=math.fsum(r.inp for r in kept) / n,
        cmc=cmc,
        n_valid=n,
        skipped=skipped,
        per_query=tuple(kept),
    )


def pairwise_distances(
    query: np.ndarray, gallery: np.ndarray, metric: str = DISTANCE_COSINE
) -> np.ndarray:
    """Distance matrix between embedding rows.

    ``cosine`` is the squared Euclidean distance of L2-normalized rows, which
    orders galleries exactly as cosine distance does; ``euclidean`` is the
    plain Euclidean distance.
    """
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise UsageError(f"embedding shapes {q.shape} and {g.shape} are incompatible")
    if metric == DISTANCE_COSINE:
        q = _normalize_rows(q)
        g = _normalize_rows(g)
    elif metric != DISTANCE_EUCLIDEAN:
        raise UsageError(f"Unknown distance {metric!r}")
    sq = (q * q).sum(axis=1)[:, None] + (g * g).sum(axis=1)[None, :] - 2.0 * (q @ g.T)
    np.maximum(sq, 0.0, out=sq)
    return sq if metric == DISTANCE_COSINE else np.sqrt(sq)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError(f"pearson needs equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise UsageError("pearson needs at least two points")
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        raise ZeroVarianceError("pearson is undefined for a constant series")
    return float(np.clip(stats.pearsonr(a, b)[0], -1.0, 1.0))
