"""Identity (cross-entropy) and consistent identity (three-way Jensen-Shannon)
losses in float64, for cross-checking external training code."""
from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from .const import LAMBDA_CID, LOG_EPS
from .errors import NonFiniteError, SupportViolationError, UsageError

_LOGGER = logging.getLogger(__name__)

_SUM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class BatchLabels:
    logits: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        logits = np.asarray(self.logits, dtype=np.float64)
        labels = np.asarray(self.labels)
        if logits.ndim != 2 or logits.shape[0] < 1 or logits.shape[1] < 1:
            raise UsageError(f"logits must be a non-empty n x N matrix, got {logits.shape}")
        if labels.shape != (logits.shape[0],):
            raise UsageError(
                f"labels must have shape ({logits.shape[0]},), got {labels.shape}"
            )
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            raise UsageError(f"labels must be integers, got {labels.dtype}")
        labels = labels.astype(np.int64)
        if labels.min() < 0 or labels.max() >= logits.shape[1]:
            raise UsageError(f"labels must lie in [0, {logits.shape[1]})")
        if not np.isfinite(logits).all():
            raise NonFiniteError("logits contain non-finite values")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.logits.shape[0]


def identity_loss(batch: BatchLabels) -> float:
    """Mean negative log-likelihood of the true labels."""
    picked = log_softmax(batch.logits, axis=1)[np.arange(batch.size), batch.labels]
    return -math.fsum(picked.tolist()) / batch.size


def identity_loss_grad(batch: BatchLabels) -> np.ndarray:
    """Gradient of :func:`identity_loss` with respect to the logits."""
    grad = softmax(batch.logits, axis=1)
    grad[np.arange(batch.size), batch.labels] -= 1.0
    return grad / batch.size


def _probability_vector(name: str, p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise UsageError(f"{name} must be a non-empty vector")
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains non-finite values")
    if (arr < 0).any():
        raise UsageError(f"{name} has negative entries")
    total = math.fsum(arr.tolist())
    if abs(total - 1.0) > _SUM_TOLERANCE:
        raise UsageError(f"{name} sums to {total!r}, expected 1")
    return arr


def kl_divergence(p, q) -> float:
    """KL[p || q] with 0 * log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise UsageError(f"p and q must be equal-length vectors, got {p.shape} and {q.shape}")
    support = p > 0
    bad = np.flatnonzero(support & (q <= 0))
    if bad.size:
        raise SupportViolationError(int(bad[0]))
    ps = p[support]
    terms = ps * (np.log(np.maximum(ps, LOG_EPS)) - np.log(np.maximum(q[support], LOG_EPS)))
    return max(0.0, math.fsum(terms.tolist()))


@dataclass(frozen=True)
class PosteriorTriple:
    p_orig: np.ndarray
    p_aug1: np.ndarray
    p_aug2: np.ndarray

    def __post_init__(self) -> None:
        vectors = [
            _probability_vector(name, getattr(self, name))
            for name in ("p_orig", "p_aug1", "p_aug2")
        ]
        if len({v.size for v in vectors}) != 1:
            raise UsageError("posterior vectors must have equal length")
        for name, vector in zip(("p_orig", "p_aug1", "p_aug2"), vectors):
            object.__setattr__(self, name, vector)

    @property
    def m(self) -> np.ndarray:
        return (self.p_orig + self.p_aug1 + self.p_aug2) / 3.0


def consistent_id_loss(t: PosteriorTriple) -> float:
    m = t.m
    parts = [kl_divergence(p, m) for p in (t.p_orig, t.p_aug1, t.p_aug2)]
    return math.fsum(parts) / 3.0


def combined_objective(
    batch: BatchLabels, triples: Sequence[PosteriorTriple], lambda_cid: float = LAMBDA_CID
) -> float:
    if lambda_cid < 0:
        raise UsageError(f"lambda_cid must be >= 0, got {lambda_cid}")
    base = identity_loss(batch)
    if not triples:
        return base
    consistency = math.fsum(consistent_id_loss(t) for t in triples) / len(triples)
    return base + lambda_cid * consistency


def split_batch(
    logits: np.ndarray, labels: np.ndarray, splits: int = 3
) -> Tuple[BatchLabels, List[PosteriorTriple]]:
    """Read a batch stacked as (clean, aug1, aug2) row blocks.

    The identity loss applies to the clean block; each row index gives one
    posterior triple from the softmax of the three blocks.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if splits == 1:
        return BatchLabels(logits, labels), []
    if splits != 3:
        raise UsageError(f"splits must be 1 or 3, got {splits}")
    if logits.shape[0] % 3:
        raise UsageError(f"{logits.shape[0]} rows cannot be split into 3 equal blocks")
    n = logits.shape[0] // 3
    if not np.isfinite(logits).all():
        raise NonFiniteError("logits contain non-finite values")
    probs = softmax(logits, axis=1)
    triples = [PosteriorTriple(probs[i], probs[n + i], probs[2 * n + i]) for i in range(n)]
    return BatchLabels(logits[:n], labels[:n]), triples


def loss_summary(
    logits: np.ndarray, labels: np.ndarray, *, splits: int = 1, lambda_cid: float = LAMBDA_CID
) -> Dict[str, float]:
    batch, triples = split_batch(logits, labels, splits)
    out = {"identity_loss": identity_loss(batch)}
    if triples:
        out["consistent_id_loss"] = math.fsum(consistent_id_loss(t) for t in triples) / len(
            triples
        )
    out["combined"] = combined_objective(batch, triples, lambda_cid)
    _LOGGER.debug("Loss summary over %s rows: %s", batch.size, out)
    return out
