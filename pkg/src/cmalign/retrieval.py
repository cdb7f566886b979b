"""Cross-modal retrieval evaluation: bidirectional mean average precision.

Queries from one modality rank the other modality's gallery by descending
dot product (ties broken by gallery index via a stable sort); an item is
relevant when its true label matches the query's. Queries with no relevant
gallery item have undefined AP and are excluded from the mean.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

__all__ = ["DirectionResult", "RetrievalReport", "average_precision",
           "cross_modal_map", "bidirectional_map"]

logger = logging.getLogger(__name__)


@dataclass
class DirectionResult:
    mean_ap: float
    per_query_ap: np.ndarray  # [Q], NaN for excluded queries
    n_queries: int
    n_gallery: int
    n_excluded: int


@dataclass
class RetrievalReport:
    map_1to2: float
    map_2to1: float
    dir_1to2: DirectionResult
    dir_2to1: DirectionResult


def average_precision(ranked_relevance) -> float | None:
    """AP of a ranked binary relevance list: (1/R) * sum over relevant ranks k
    of (relevant-in-top-k / k). Returns None when nothing is relevant."""
    rel = np.asarray(ranked_relevance, dtype=bool)
    if rel.size == 0:
        raise ValueError("average_precision: empty ranking")
    total = int(rel.sum())
    if total == 0:
        return None
    ranks = np.flatnonzero(rel) + 1
    return float((np.arange(1, total + 1) / ranks).mean())


def cross_modal_map(query_embeddings: np.ndarray, gallery_embeddings: np.ndarray,
                    query_labels: np.ndarray, gallery_labels: np.ndarray) -> DirectionResult:
    """mAP of one retrieval direction; relevance = same label."""
    q = np.asarray(query_embeddings, dtype=np.float64)
    g = np.asarray(gallery_embeddings, dtype=np.float64)
    if g.shape[0] == 0:
        raise ValueError("cross_modal_map: empty gallery")
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"cross_modal_map: incompatible shapes {q.shape} vs {g.shape}")
    qlab = np.asarray(query_labels)
    glab = np.asarray(gallery_labels)

    sims = q @ g.T
    aps = np.full(q.shape[0], np.nan)
    for r in range(q.shape[0]):
        order = np.argsort(-sims[r], kind="stable")  # ties keep gallery index order
        ap = average_precision(glab[order] == qlab[r])
        if ap is not None:
            aps[r] = ap
    defined = ~np.isnan(aps)
    n_excluded = int((~defined).sum())
    if n_excluded:
        logger.debug("cross_modal_map: %d queries had no relevant gallery item", n_excluded)
    mean_ap = float(aps[defined].mean()) if defined.any() else 0.0
    return DirectionResult(mean_ap=mean_ap, per_query_ap=aps, n_queries=q.shape[0],
                           n_gallery=g.shape[0], n_excluded=n_excluded)


def bidirectional_map(emb_1: np.ndarray, emb_2: np.ndarray,
                      labels_1: np.ndarray, labels_2: np.ndarray) -> RetrievalReport:
    """Both retrieval directions between two aligned modality embeddings."""
    d12 = cross_modal_map(emb_1, emb_2, labels_1, labels_2)
    d21 = cross_modal_map(emb_2, emb_1, labels_2, labels_1)
    return RetrievalReport(map_1to2=d12.mean_ap, map_2to1=d21.mean_ap,
                           dir_1to2=d12, dir_2to1=d21)
