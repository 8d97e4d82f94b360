"""Retrieval metrics: mAP / CMC and sorted-distance curves."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .embedding import DistanceMatrix, EmbeddingSet, LabelMeta, euclidean_distances
from .exceptions import NoValidQueries, RankOutOfRange


@dataclass(frozen=True)
class EvalReport:
    map: float
    cmc: np.ndarray
    num_valid_queries: int

    def rank(self, k):
        """CMC at rank ``k`` (1-based), saturating past the end of the curve."""
        return float(self.cmc[min(k, len(self.cmc)) - 1])


@dataclass(frozen=True)
class CurveConfig:
    alpha: float = 1.0
    max_rank: Optional[int] = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.max_rank is not None and self.max_rank < 1:
            raise ValueError("max_rank must be positive")


def junk_mask(query_meta: LabelMeta, q: int, gallery_meta: LabelMeta):
    """Gallery entries to ignore for query ``q``.

    With camera ids on both sides: same vehicle seen by the same camera.
    Otherwise only the query image itself.
    """
    if query_meta.has_cameras and gallery_meta.has_cameras:
        return (gallery_meta.vehicle_ids == query_meta.vehicle_ids[q]) & (
            gallery_meta.camera_ids == query_meta.camera_ids[q]
        )
    return gallery_meta.image_ids == query_meta.image_ids[q]


def evaluate(distances: DistanceMatrix, max_rank: Optional[int] = None) -> EvalReport:
    """Mean average precision and CMC curve for a query-by-gallery distance matrix.

    Gallery items are ranked by ascending distance, ties broken by ascending
    gallery image id. Queries left without any positive after junk removal
    are dropped from both metrics.
    """
    values = distances.values
    qm, gm = distances.query_meta, distances.gallery_meta
    m, n = values.shape
    max_rank = n if max_rank is None else min(max_rank, n)
    cmc = np.zeros(max_rank)
    ap_sum = 0.0
    valid = 0
    for q in range(m):
        order = np.lexsort((gm.image_ids, values[q]))
        keep = ~junk_mask(qm, q, gm)[order]
        hits = (gm.vehicle_ids[order] == qm.vehicle_ids[q])[keep]
        positions = np.flatnonzero(hits)
        if positions.size == 0:
            continue
        valid += 1
        precision = np.arange(1, positions.size + 1) / (positions + 1.0)
        ap_sum += precision.mean()
        if positions[0] < max_rank:
            cmc[positions[0]:] += 1.0
    if valid == 0:
        raise NoValidQueries("no query has a valid positive in the gallery")
    return EvalReport(ap_sum / valid, cmc / valid, valid)


def distance_curve(query: EmbeddingSet, gallery: Optional[EmbeddingSet] = None,
                   config: Optional[CurveConfig] = None):
    """Position-wise mean of each query's sorted distances raised to ``alpha``.

    ``gallery=None`` selects the training mode where the query set also serves
    as the gallery. Same-vehicle same-camera gallery items are removed per
    query (the query image itself when cameras are absent).
    """
    config = config or CurveConfig()
    gallery = query if gallery is None else gallery
    query, gallery = query.normalize(), gallery.normalize()
    d = euclidean_distances(query.features, gallery.features)
    qm, gm = query.meta, gallery.meta
    rows = []
    for q in range(len(query)):
        kept = np.sort(d[q][~junk_mask(qm, q, gm)])
        rows.append(kept)
    shortest = min(r.size for r in rows) if rows else 0
    max_rank = shortest if config.max_rank is None else config.max_rank
    if max_rank > shortest or max_rank < 1:
        raise RankOutOfRange(f"max_rank {max_rank} exceeds the smallest filtered gallery ({shortest})")
    stacked = np.stack([r[:max_rank] for r in rows])
    return np.mean(np.power(stacked, config.alpha), axis=0)
