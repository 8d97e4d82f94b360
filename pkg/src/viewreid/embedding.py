"""Embedding containers and the distance/similarity primitives everything else uses."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from sklearn.utils.validation import check_array, column_or_1d

from .exceptions import (
    DimensionMismatch,
    NegativeDistance,
    NotNormalized,
    ShapeMismatch,
    ViewOutOfRange,
    ZeroVector,
)

NORM_TOL = 1e-6
ZERO_NORM = 1e-12

KIND_RAW = "raw"
KIND_UNIFIED = "unified"
KIND_SCALED = "scaled"
DISTANCE_KINDS = (KIND_RAW, KIND_UNIFIED, KIND_SCALED)


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _labels(values, n, name):
    arr = column_or_1d(np.asarray(values), warn=False)
    if arr.shape[0] != n:
        raise ShapeMismatch(f"{name} has {arr.shape[0]} entries, expected {n}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        as_int = arr.astype(np.int64)
        if not np.array_equal(as_int, arr):
            raise ValueError(f"{name} must be integers")
        arr = as_int
    return _frozen(arr.astype(np.int64))


@dataclass(frozen=True)
class LabelMeta:
    """Per-row labels of one split, detached from the features."""

    image_ids: np.ndarray
    vehicle_ids: np.ndarray
    view_ids: np.ndarray
    camera_ids: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.image_ids)

    @property
    def has_cameras(self):
        return self.camera_ids is not None

    def take(self, index):
        return LabelMeta(
            image_ids=_frozen(self.image_ids[index]),
            vehicle_ids=_frozen(self.vehicle_ids[index]),
            view_ids=_frozen(self.view_ids[index]),
            camera_ids=None if self.camera_ids is None else _frozen(self.camera_ids[index]),
        )


@dataclass(frozen=True)
class EmbeddingSet:
    """Features plus vehicle / camera / view labels for one split.

    ``camera_ids`` is ``None`` when the source has no camera information.
    Features are held as float64 whatever the input precision.
    """

    features: np.ndarray
    image_ids: np.ndarray
    vehicle_ids: np.ndarray
    view_ids: np.ndarray
    num_views: int
    camera_ids: Optional[np.ndarray] = None
    normalized: bool = False

    def __post_init__(self):
        feats = check_array(self.features, dtype=np.float64, ensure_min_samples=0)
        n = feats.shape[0]
        if feats.shape[1] < 1:
            raise ShapeMismatch("features need at least one column")
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "image_ids", _labels(self.image_ids, n, "image_ids"))
        object.__setattr__(self, "vehicle_ids", _labels(self.vehicle_ids, n, "vehicle_ids"))
        object.__setattr__(self, "view_ids", _labels(self.view_ids, n, "view_ids"))
        if self.camera_ids is not None:
            object.__setattr__(self, "camera_ids", _labels(self.camera_ids, n, "camera_ids"))
        num_views = int(self.num_views)
        if num_views < 1:
            raise ValueError("num_views must be positive")
        object.__setattr__(self, "num_views", num_views)
        if n and (self.view_ids.min() < 0 or self.view_ids.max() >= num_views):
            raise ViewOutOfRange(f"view ids must lie in [0, {num_views})")
        if np.unique(self.image_ids).size != n:
            raise ValueError("image_ids must be unique")
        if self.normalized and n:
            norms = np.linalg.norm(feats, axis=1)
            if np.max(np.abs(norms - 1.0)) > NORM_TOL:
                raise NotNormalized("set flagged normalized but a row norm differs from 1")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def has_cameras(self):
        return self.camera_ids is not None

    @property
    def meta(self):
        return LabelMeta(self.image_ids, self.vehicle_ids, self.view_ids, self.camera_ids)

    def normalize(self):
        """Return a copy with unit-norm rows (no-op copy if already normalized)."""
        if self.normalized:
            return self
        return replace(self, features=l2_normalize(self.features), normalized=True)

    def with_features(self, features, normalized=None):
        return replace(
            self,
            features=features,
            normalized=self.normalized if normalized is None else normalized,
        )

    def subset(self, index):
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.int64)
        return EmbeddingSet(
            features=self.features[index],
            image_ids=self.image_ids[index],
            vehicle_ids=self.vehicle_ids[index],
            view_ids=self.view_ids[index],
            num_views=self.num_views,
            camera_ids=None if self.camera_ids is None else self.camera_ids[index],
            normalized=self.normalized,
        )


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray
    query_meta: LabelMeta
    gallery_meta: LabelMeta
    kind: str = KIND_RAW
    gamma: Optional[float] = field(default=None)

    def __post_init__(self):
        vals = check_array(self.values, dtype=np.float64, ensure_min_samples=0, ensure_min_features=0)
        if vals.shape != (len(self.query_meta), len(self.gallery_meta)):
            raise ShapeMismatch(
                f"distance matrix shape {vals.shape} does not match "
                f"{len(self.query_meta)} queries x {len(self.gallery_meta)} gallery items"
            )
        if self.kind not in DISTANCE_KINDS:
            raise ValueError(f"unknown distance kind {self.kind!r}")
        if vals.size and vals.min() < 0:
            raise NegativeDistance("distances must be nonnegative")
        object.__setattr__(self, "values", _frozen(vals))

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray


def l2_normalize(features):
    """Scale every row to unit Euclidean norm.

    Raises ZeroVector when a row norm is below 1e-12.
    """
    x = np.asarray(features, dtype=np.float64)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    bad = np.flatnonzero(norms < ZERO_NORM)
    if bad.size:
        raise ZeroVector(f"row {bad[0]} has (near) zero norm")
    out = x / norms[:, None]
    return out[0] if squeeze else out


def euclidean_distances(a, b, chunk_rows=256):
    """Exact pairwise Euclidean distances between the rows of ``a`` and ``b``.

    Differences are formed explicitly rather than through the
    ``|a|^2 + |b|^2 - 2ab`` expansion, so identical rows give exactly zero.
    Each entry's summation order is fixed by the feature axis alone.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"dimension {a.shape[1]} vs {b.shape[1]}")
    out = np.empty((a.shape[0], b.shape[0]))
    # bound the (rows, n, dim) temporary to ~32 MB
    step = max(1, min(chunk_rows, (1 << 22) // max(1, b.shape[0] * a.shape[1])))
    for start in range(0, a.shape[0], step):
        diff = a[start:start + step, None, :] - b[None, :, :]
        out[start:start + step] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def pairwise_euclidean(A: EmbeddingSet, B: EmbeddingSet) -> DistanceMatrix:
    if A.dim != B.dim:
        raise DimensionMismatch(f"dimension {A.dim} vs {B.dim}")
    return DistanceMatrix(euclidean_distances(A.features, B.features), A.meta, B.meta, KIND_RAW)


def inner_products(A: EmbeddingSet, B: EmbeddingSet) -> SimilarityMatrix:
    if not (A.normalized and B.normalized):
        raise NotNormalized("inner products require normalized sets")
    if A.dim != B.dim:
        raise DimensionMismatch(f"dimension {A.dim} vs {B.dim}")
    return SimilarityMatrix(_frozen(A.features @ B.features.T))
