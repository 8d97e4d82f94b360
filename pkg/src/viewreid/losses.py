"""Supervised contrastive losses with closed-form gradients.

Two flavours are provided:

* ``lsupcon`` -- the batch-local supervised contrastive loss. Every batch
  feature is both an anchor and a key, so its gradient collects the
  anchor-as-query term *and* the anchor-as-key term (two-way movement).
* ``gsupcon`` -- the global variant. Keys come from a
  :class:`GlobalFeatureDictionary` holding one detached feature per training
  image; only anchors receive gradient (one-way movement).

Both losses are sums over anchors, not means, and work on raw inner products
``f_i . f_a / tau``; callers normalise features beforehand.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .embedding import EmbeddingSet, NORM_TOL, l2_normalize
from .exceptions import (
    BatchTooSmall,
    DictionaryIncomplete,
    InvalidEpsilon,
    LabelOutOfRange,
    NoPositives,
    NotNormalized,
    ShapeMismatch,
    UnknownClass,
    UnknownImageId,
)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    include_self_in_global_positives: bool = True
    dictionary_momentum: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.dictionary_momentum <= 1.0:
            raise ValueError("dictionary_momentum must lie in [0, 1]")


@dataclass(frozen=True)
class LossOutput:
    value: float
    grad_anchors: np.ndarray


@dataclass(frozen=True)
class LossWeights:
    lambda_id: float = 1.0
    lambda_metric: float = 1.0

    def __post_init__(self):
        if self.lambda_id < 0 or self.lambda_metric < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_id == 0 and self.lambda_metric == 0:
            raise ValueError("loss weights cannot both be zero")


@dataclass(frozen=True)
class ConvergenceStats:
    max_positive_gap: float
    max_negative_mass: float


class GlobalFeatureDictionary:
    """One detached unit feature per training image, keyed by image id.

    Instances are never mutated: :meth:`update` returns a new dictionary, so
    a reader holding the old one keeps a consistent snapshot.
    """

    def __init__(self, image_ids, labels, features):
        image_ids = np.asarray(image_ids, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        features = np.array(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != image_ids.shape[0] or labels.shape != image_ids.shape:
            raise ShapeMismatch("dictionary ids, labels and features disagree in length")
        if np.unique(image_ids).size != image_ids.size:
            raise ValueError("dictionary image ids must be unique")
        norms = np.linalg.norm(features, axis=1)
        if features.size and np.max(np.abs(norms - 1.0)) > NORM_TOL:
            raise NotNormalized("dictionary entries must be unit vectors")
        for a in (image_ids, labels, features):
            a.setflags(write=False)
        self.image_ids = image_ids
        self.labels = labels
        self.features = features
        self._index = {int(k): i for i, k in enumerate(image_ids)}

    @classmethod
    def from_embeddings(cls, train: EmbeddingSet):
        """Initialise every entry with the image's current embedding."""
        feats = train.features if train.normalized else l2_normalize(train.features)
        return cls(train.image_ids, train.vehicle_ids, feats)

    def __len__(self):
        return self.image_ids.shape[0]

    def __contains__(self, image_id):
        return int(image_id) in self._index

    @property
    def dim(self):
        return self.features.shape[1]

    def positions(self, image_ids, error=UnknownImageId):
        try:
            return np.array([self._index[int(i)] for i in image_ids], dtype=np.int64)
        except KeyError as exc:
            raise error(f"image id {exc.args[0]} not in dictionary") from None

    def __getitem__(self, image_id):
        return self.features[self.positions([image_id])[0]]

    def label_of(self, image_id):
        return int(self.labels[self.positions([image_id])[0]])

    def update(self, batch_ids, batch_features, momentum=0.0):
        return update_dictionary(self, batch_ids, batch_features, momentum)


def update_dictionary(dictionary, batch_ids, batch_features, momentum=0.0):
    """Blend batch features into their dictionary slots and renormalise.

    ``entry <- normalize(momentum * old + (1 - momentum) * new)``; momentum 0
    is plain replacement, momentum 1 freezes the dictionary.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    batch_features = np.atleast_2d(np.asarray(batch_features, dtype=np.float64))
    pos = dictionary.positions(batch_ids)
    if batch_features.shape != (pos.size, dictionary.dim):
        raise ShapeMismatch("batch features do not match batch ids / dictionary dim")
    feats = dictionary.features.copy()
    if momentum < 1.0:
        feats[pos] = l2_normalize(momentum * feats[pos] + (1.0 - momentum) * batch_features)
    return GlobalFeatureDictionary(dictionary.image_ids, dictionary.labels, feats)


def _unpack(batch, labels, image_ids):
    if isinstance(batch, EmbeddingSet):
        if not batch.normalized:
            raise NotNormalized("loss batch must be normalized")
        return batch.features, batch.vehicle_ids, batch.image_ids
    feats = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if labels is None:
        raise ValueError("labels are required when passing a raw feature array")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (feats.shape[0],):
        raise ShapeMismatch("one label per feature row required")
    if image_ids is not None:
        image_ids = np.asarray(image_ids, dtype=np.int64)
    return feats, labels, image_ids


def _log_softmax(logits):
    """Row-wise log-softmax with max subtraction; ``-inf`` entries are excluded keys."""
    m = np.max(logits, axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    return shifted - lse


def lsupcon(batch, config: Optional[LossConfig] = None, *, labels=None) -> LossOutput:
    """Batch-local supervised contrastive loss and its gradient.

    Parameters
    ----------
    batch : EmbeddingSet or array of shape (batch_size, dim)
        Normalized embedding set, or a raw feature array together with
        ``labels``. Raw arrays are not checked for unit norm so that the
        value can be probed at perturbed points.
    config : LossConfig, optional
        Only ``tau`` is used.
    labels : array of int, optional
        Class labels when ``batch`` is an array.

    Returns
    -------
    LossOutput
        Summed loss and the full gradient with respect to every batch row,
        including the contributions where the row acts as a key for other
        anchors.
    """
    config = config or LossConfig()
    feats, y, _ = _unpack(batch, labels, None)
    n = feats.shape[0]
    if n < 2:
        raise BatchTooSmall("lsupcon needs at least two samples")
    pos = y[:, None] == y[None, :]
    np.fill_diagonal(pos, False)
    npos = pos.sum(axis=1)
    if np.any(npos == 0):
        raise NoPositives(int(np.flatnonzero(npos == 0)[0]))

    logits = feats @ feats.T / config.tau
    np.fill_diagonal(logits, -np.inf)
    logprob = _log_softmax(logits)
    value = -np.sum(np.where(pos, logprob, 0.0).sum(axis=1) / npos)

    gamma = np.exp(logprob)  # diagonal is exp(-inf) = 0
    w = gamma - pos / npos[:, None]
    grad = (w + w.T) @ feats / config.tau
    return LossOutput(float(value), grad)


def _global_logits(feats, y, ids, dictionary, config):
    if ids is not None:
        missing = [int(i) for i in ids if int(i) not in dictionary]
        if missing:
            raise DictionaryIncomplete(f"batch image id {missing[0]} not in dictionary")
    known = np.isin(y, dictionary.labels)
    if not np.all(known):
        raise UnknownClass(f"class {int(y[~known][0])} absent from dictionary")
    if feats.shape[1] != dictionary.dim:
        raise ShapeMismatch("anchor dim differs from dictionary dim")

    logits = feats @ dictionary.features.T / config.tau
    pos = y[:, None] == dictionary.labels[None, :]
    if not config.include_self_in_global_positives:
        if ids is None:
            raise ValueError("image ids are required to exclude self from the dictionary")
        own = ids[:, None] == dictionary.image_ids[None, :]
        pos &= ~own
        logits[own] = -np.inf
    npos = pos.sum(axis=1)
    if np.any(npos == 0):
        raise NoPositives(int(np.flatnonzero(npos == 0)[0]))
    return logits, pos, npos


def gsupcon(batch, dictionary: GlobalFeatureDictionary, config: Optional[LossConfig] = None, *,
            labels=None, image_ids=None) -> LossOutput:
    """Global supervised contrastive loss against a fixed feature dictionary.

    The denominator runs over every dictionary entry. Dictionary entries
    are constants: no gradient is formed for them.
    """
    config = config or LossConfig()
    feats, y, ids = _unpack(batch, labels, image_ids)
    logits, pos, npos = _global_logits(feats, y, ids, dictionary, config)
    logprob = _log_softmax(logits)
    value = -np.sum(np.where(pos, logprob, 0.0).sum(axis=1) / npos)
    w = np.exp(logprob) - pos / npos[:, None]
    grad = w @ dictionary.features / config.tau
    return LossOutput(float(value), grad)


def convergence_stats(batch, dictionary: GlobalFeatureDictionary, config: Optional[LossConfig] = None, *,
                      labels=None, image_ids=None) -> ConvergenceStats:
    """Distance of the global softmax responsibilities from their optimum.

    At a stationary point of ``gsupcon`` each positive responsibility tends to
    ``1/|P(i)|`` and each negative one to zero; this reports the worst
    deviation from both.
    """
    config = config or LossConfig()
    feats, y, ids = _unpack(batch, labels, image_ids)
    logits, pos, npos = _global_logits(feats, y, ids, dictionary, config)
    gamma = np.exp(_log_softmax(logits))
    neg = y[:, None] != dictionary.labels[None, :]
    gap = np.abs(gamma - 1.0 / npos[:, None])
    max_gap = float(np.max(gap[pos]))
    max_neg = float(np.max(gamma[neg])) if np.any(neg) else 0.0
    return ConvergenceStats(max_gap, max_neg)


def label_smooth_ce(logits, labels, epsilon=0.1) -> LossOutput:
    """Label-smoothed cross entropy, averaged over the batch.

    The target puts ``1 - epsilon`` on the true class and spreads
    ``epsilon`` evenly over the remaining ``C - 1`` classes. The returned
    gradient is with respect to the logits.
    """
    if not 0.0 <= epsilon < 1.0:
        raise InvalidEpsilon("epsilon must lie in [0, 1)")
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if c < 2:
        raise ValueError("need at least two classes")
    if labels.shape != (b,):
        raise ShapeMismatch("one label per logit row required")
    if np.any((labels < 0) | (labels >= c)):
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    target = np.full((b, c), epsilon / (c - 1))
    target[np.arange(b), labels] = 1.0 - epsilon
    logprob = _log_softmax(logits)
    value = -np.sum(target * logprob) / b
    grad = (np.exp(logprob) - target) / b
    return LossOutput(float(value), grad)


def combined_loss(id_loss: Optional[LossOutput], metric_losses: Sequence[LossOutput],
                  weights: LossWeights = LossWeights()) -> LossOutput:
    """``lambda_id * L_id + lambda_metric * sum(metric_losses)``.

    With one metric loss this is the large-training-set objective; passing
    both the global and local losses gives the small-set variant, where the
    same metric weight multiplies each.
    """
    terms = []
    if id_loss is not None:
        terms.append((weights.lambda_id, id_loss))
    terms.extend((weights.lambda_metric, m) for m in metric_losses)
    if not terms:
        raise ValueError("nothing to combine")
    shape = terms[0][1].grad_anchors.shape
    for _, t in terms:
        if t.grad_anchors.shape != shape:
            raise ShapeMismatch(f"gradient shape {t.grad_anchors.shape} differs from {shape}")
    value = sum(w * t.value for w, t in terms)
    grad = sum(w * t.grad_anchors for w, t in terms)
    return LossOutput(float(value), grad)


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    passed: bool
    tol: float
    step: float


LossFn = Callable[..., LossOutput]
_NAMED = {"lsupcon": lsupcon, "gsupcon": gsupcon}


def relative_error(analytic, numeric, floor=1e-8):
    """Entrywise ``|a - n| / max(|a|, |n|, s)`` with ``s = floor * max(1, max|a|)``.

    The scale floor keeps entries whose true derivative is ~0 from turning
    cancellation noise into a huge ratio.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = floor * max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), scale)


def numeric_gradient(fn: Callable[[np.ndarray], float], x, step=1e-5):
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        up = fn(x)
        x[idx] = orig - step
        down = fn(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2.0 * step)
    return grad


def finite_diff_check(loss_fn: Union[str, LossFn], features, *args, step=1e-5, tol=1e-4,
                      **kwargs) -> GradCheckReport:
    """Compare a loss's analytic anchor gradient with central differences.

    ``loss_fn`` is ``"lsupcon"``, ``"gsupcon"`` or any callable
    ``fn(features, *args, **kwargs) -> LossOutput``. Only ``features`` is
    perturbed; everything else is held fixed. Mismatch is reported, never
    raised.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    fn = _NAMED[loss_fn] if isinstance(loss_fn, str) else loss_fn
    x = np.array(features, dtype=np.float64)
    analytic = fn(x, *args, **kwargs).grad_anchors
    numeric = numeric_gradient(lambda z: fn(z, *args, **kwargs).value, x, step)
    rel = relative_error(analytic, numeric)
    max_rel = float(np.max(rel)) if rel.size else 0.0
    max_abs = float(np.max(np.abs(analytic - numeric))) if rel.size else 0.0
    return GradCheckReport(max_rel, max_abs, bool(max_rel < tol), tol, step)
