"""View-aware post-processing of test distances.

The training split supplies, for every (query view, gallery view) pair, the
mean distance between cross-camera positives (the *center* matrix). The
ratio of a row's same-view center to each cross-view center gives a scaling
coefficient; at test time distances are first raised to a power ``gamma``
and then multiplied by the coefficient of their view pair. Same-view
distances are never rescaled, so rankings among same-view gallery items are
unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .embedding import (
    KIND_RAW,
    KIND_SCALED,
    KIND_UNIFIED,
    DistanceMatrix,
    EmbeddingSet,
    euclidean_distances,
    l2_normalize,
    pairwise_euclidean,
)
from .exceptions import (
    DegenerateCenter,
    EmptySet,
    MissingDiagonalCenter,
    NegativeDistance,
    NotNormalized,
    ShapeMismatch,
    ViewOutOfRange,
    WrongDistanceKind,
)


@dataclass(frozen=True)
class CenterMatrix:
    """Mean cross-camera positive distance per view pair.

    ``centers[i, j]`` is NaN exactly when ``counts[i, j] == 0``.
    """

    centers: np.ndarray
    counts: np.ndarray

    @property
    def num_views(self):
        return self.centers.shape[0]

    @property
    def populated(self):
        return self.counts > 0


@dataclass(frozen=True)
class ScalingMatrix:
    """Per view-pair distance scaling coefficients; row = query view, column = gallery view.

    The matrix is in general asymmetric and that asymmetry is meaningful.
    """

    delta: np.ndarray
    dataset: Optional[str] = None
    view_names: Optional[Sequence[str]] = None
    gamma_used: Optional[float] = None

    def __post_init__(self):
        d = np.array(self.delta, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] < 1:
            raise ShapeMismatch(f"scaling matrix must be square, got shape {d.shape}")
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise ValueError("scaling coefficients must be positive and finite")
        if not np.all(np.diag(d) == 1.0):
            raise ValueError("scaling matrix diagonal must be exactly 1")
        if self.view_names is not None:
            if len(self.view_names) != d.shape[0]:
                raise ShapeMismatch("one view name per view required")
            object.__setattr__(self, "view_names", tuple(self.view_names))
        d.setflags(write=False)
        object.__setattr__(self, "delta", d)

    @property
    def num_views(self):
        return self.delta.shape[0]

    @property
    def difficulty(self):
        """Match-difficulty matrix, the elementwise reciprocal of ``delta``."""
        return 1.0 / self.delta

    def __getitem__(self, index):
        return self.delta[index]

    @classmethod
    def identity(cls, num_views):
        return cls(np.ones((num_views, num_views)))


@dataclass(frozen=True)
class VabppConfig:
    gamma: float = 2.0
    fallback_delta: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not (np.isfinite(self.fallback_delta) and self.fallback_delta > 0):
            raise ValueError("fallback_delta must be positive")


def _positive_pair_mask(cams, n_group):
    if cams is None:
        mask = np.ones((n_group, n_group), dtype=bool)
        np.fill_diagonal(mask, False)
        return mask
    return cams[:, None] != cams[None, :]


def compute_center_matrix(train: EmbeddingSet) -> CenterMatrix:
    """Average positive distance for every (query view, gallery view) pair.

    Every training image acts as a query against every other image of the
    same vehicle taken by a different camera. Without camera ids the only
    excluded pair is an image with itself.
    """
    if len(train) == 0:
        raise EmptySet("training set is empty")
    if not train.normalized:
        raise NotNormalized("center matrix expects normalized training features")
    v = train.num_views
    sums = np.zeros((v, v))
    counts = np.zeros((v, v), dtype=np.int64)
    order = np.argsort(train.vehicle_ids, kind="stable")
    ids = train.vehicle_ids[order]
    bounds = np.flatnonzero(np.diff(ids)) + 1
    for group in np.split(order, bounds):
        if group.size < 2:
            continue
        cams = None if train.camera_ids is None else train.camera_ids[group]
        mask = _positive_pair_mask(cams, group.size)
        if not mask.any():
            continue
        d = euclidean_distances(train.features[group], train.features[group])
        qi, gi = np.nonzero(mask)
        vq = train.view_ids[group][qi]
        vg = train.view_ids[group][gi]
        np.add.at(sums, (vq, vg), d[qi, gi])
        np.add.at(counts, (vq, vg), 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        centers = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return CenterMatrix(centers, counts)


def compute_delta(centers: CenterMatrix, config: Optional[VabppConfig] = None, **meta) -> ScalingMatrix:
    """Scaling coefficients ``delta[i, j] = c(i, i) / c(i, j)``; 1 on the diagonal.

    Cells without any positive pair get ``config.fallback_delta``.
    """
    config = config or VabppConfig()
    c = centers.centers
    counts = centers.counts
    v = centers.num_views
    delta = np.empty((v, v))
    for i in range(v):
        if counts[i, i] == 0:
            raise MissingDiagonalCenter(i)
        for j in range(v):
            if i == j:
                delta[i, j] = 1.0
            elif counts[i, j] == 0:
                delta[i, j] = config.fallback_delta
            else:
                if c[i, i] <= 0 or c[i, j] <= 0:
                    raise DegenerateCenter(
                        f"zero distance center for view pair ({i},{i}) or ({i},{j}); ratio undefined"
                    )
                delta[i, j] = c[i, i] / c[i, j]
    return ScalingMatrix(delta, **meta)


def _check_kind(distances, expected):
    if distances.kind != expected:
        raise WrongDistanceKind(f"expected {expected} distances, got {distances.kind}")


def udd(distances: DistanceMatrix, gamma: float = 2.0) -> DistanceMatrix:
    """Unify the distance distribution by raising every distance to ``gamma``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    _check_kind(distances, KIND_RAW)
    if distances.values.size and distances.values.min() < 0:
        raise NegativeDistance("distances must be nonnegative")
    return DistanceMatrix(
        np.power(distances.values, gamma),
        distances.query_meta,
        distances.gallery_meta,
        KIND_UNIFIED,
        gamma=float(gamma),
    )


def expand_delta(delta: ScalingMatrix, query_views, gallery_views):
    """Broadcast view-pair coefficients to an (m, n) query-by-gallery matrix."""
    qv = np.asarray(query_views, dtype=np.int64)
    gv = np.asarray(gallery_views, dtype=np.int64)
    v = delta.num_views
    for name, views in (("query", qv), ("gallery", gv)):
        if views.size and (views.min() < 0 or views.max() >= v):
            raise ViewOutOfRange(f"{name} view ids exceed the {v}-view scaling matrix")
    return delta.delta[qv[:, None], gv[None, :]]


def mtd(unified: DistanceMatrix, delta: ScalingMatrix, query_views=None, gallery_views=None) -> DistanceMatrix:
    """Multiply each unified distance by the coefficient of its view pair.

    View ids default to the ones carried by the matrix metadata.
    """
    _check_kind(unified, KIND_UNIFIED)
    qv = unified.query_meta.view_ids if query_views is None else query_views
    gv = unified.gallery_meta.view_ids if gallery_views is None else gallery_views
    factors = expand_delta(delta, qv, gv)
    if factors.shape != unified.shape:
        raise ShapeMismatch("view id counts do not match the distance matrix")
    return DistanceMatrix(
        unified.values * factors,
        unified.query_meta,
        unified.gallery_meta,
        KIND_SCALED,
        gamma=unified.gamma,
    )


def vabpp_pipeline(query: EmbeddingSet, gallery: EmbeddingSet, delta: ScalingMatrix,
                   config: Optional[VabppConfig] = None) -> DistanceMatrix:
    """Normalize, measure, unify, rescale: the scaled distances used for ranking."""
    config = config or VabppConfig()
    query = query.normalize()
    gallery = gallery.normalize()
    raw = pairwise_euclidean(query, gallery)
    return mtd(udd(raw, config.gamma), delta)


class ViewAwarePostProcessor(BaseEstimator):
    """Estimator wrapper around the view-aware re-scaling.

    ``fit`` learns the center and scaling matrices from labelled training
    embeddings; ``transform`` maps a raw query-by-gallery distance matrix to
    the re-scaled one. A precomputed scaling matrix (for instance one of the
    bundled tables) can be plugged in with :meth:`from_delta`.

    Parameters
    ----------
    gamma : float, default=2.0
        Exponent applied to raw distances before scaling.
    fallback_delta : float, default=1.0
        Coefficient for view pairs that have no training statistics.
    num_views : int or None, default=None
        Number of views; inferred from the training view ids when None.

    Attributes
    ----------
    centers_ : CenterMatrix
    delta_ : ScalingMatrix
    n_features_in_ : int
    """

    def __init__(self, gamma=2.0, fallback_delta=1.0, num_views=None):
        self.gamma = gamma
        self.fallback_delta = fallback_delta
        self.num_views = num_views

    def _config(self):
        return VabppConfig(gamma=self.gamma, fallback_delta=self.fallback_delta)

    def fit(self, X, y=None, *, views=None, cameras=None, image_ids=None):
        """Fit from an :class:`EmbeddingSet` or from a feature array plus labels."""
        config = self._config()
        if isinstance(X, EmbeddingSet):
            train = X
        else:
            if y is None or views is None:
                raise ValueError("y (vehicle ids) and views are required with array input")
            views = np.asarray(views)
            num_views = self.num_views or int(views.max()) + 1
            n = np.shape(X)[0]
            train = EmbeddingSet(
                features=X,
                image_ids=np.arange(n) if image_ids is None else image_ids,
                vehicle_ids=y,
                view_ids=views,
                num_views=num_views,
                camera_ids=cameras,
            )
        train = train.normalize()
        self.centers_ = compute_center_matrix(train)
        self.delta_ = compute_delta(self.centers_, config)
        self.n_features_in_ = train.dim
        return self

    @classmethod
    def from_delta(cls, delta: ScalingMatrix, gamma=2.0):
        est = cls(gamma=gamma, num_views=delta.num_views)
        est.delta_ = delta
        est.centers_ = None
        return est

    def transform(self, X, query_views=None, gallery_views=None):
        """Rescale raw distances.

        ``X`` is either a raw :class:`DistanceMatrix` (views are read from its
        metadata and a DistanceMatrix is returned) or an (m, n) array, in
        which case both view arrays are required.
        """
        check_is_fitted(self, "delta_")
        config = self._config()
        if isinstance(X, DistanceMatrix):
            return mtd(udd(X, config.gamma), self.delta_, query_views, gallery_views)
        if query_views is None or gallery_views is None:
            raise ValueError("query_views and gallery_views are required with array input")
        d = np.asarray(X, dtype=np.float64)
        if d.ndim != 2:
            raise ShapeMismatch("distance array must be 2-D")
        if d.size and d.min() < 0:
            raise NegativeDistance("distances must be nonnegative")
        factors = expand_delta(self.delta_, query_views, gallery_views)
        if factors.shape != d.shape:
            raise ShapeMismatch("view id counts do not match the distance matrix")
        return np.power(d, config.gamma) * factors

    def pairwise_distances(self, query, gallery, query_views=None, gallery_views=None):
        """Full pipeline from features: normalize, Euclidean distance, rescale."""
        check_is_fitted(self, "delta_")
        if isinstance(query, EmbeddingSet) and isinstance(gallery, EmbeddingSet):
            return vabpp_pipeline(query, gallery, self.delta_, self._config())
        raw = euclidean_distances(l2_normalize(query), l2_normalize(gallery))
        return self.transform(raw, query_views, gallery_views)
