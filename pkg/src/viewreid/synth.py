"""Synthetic multi-view embeddings, naive oracles and a toy embedding trainer.

The generator gives every vehicle a random base direction and every view a
shared offset. Offsets live in a ``num_views``-dimensional subspace and are
placed (by classical MDS) so that the expected distance between two
same-vehicle images of views ``i`` and ``j`` is ``inflation[i, j]`` times the
expected same-view distance. The view structure is therefore the same for
every vehicle, which is what the view-aware scaling relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .embedding import DistanceMatrix, EmbeddingSet, l2_normalize
from .evaluation import EvalReport, junk_mask
from .exceptions import DivergenceDetected, EmptySet, InfeasibleConfig, NoValidQueries
from .losses import (
    ConvergenceStats,
    GlobalFeatureDictionary,
    LossConfig,
    LossWeights,
    combined_loss,
    convergence_stats,
    gsupcon,
    lsupcon,
)
from .vabpp import CenterMatrix


@dataclass(frozen=True)
class SynthConfig:
    """Generator parameters.

    ``cross_view_inflation`` may be None (no view effect), a scalar applied to
    every off-diagonal view pair, or a full ``num_views x num_views`` matrix
    with unit diagonal; it is symmetrised because distances are.
    ``view_offset_scale`` multiplies the calibrated offsets: 1 reproduces the
    requested inflation, 0 removes the view effect. ``num_cameras=0`` produces
    sets without camera ids.
    """

    num_views: int = 3
    num_ids: int = 40
    num_test_ids: int = 10
    images_per_id_per_view: int = 4
    dim: int = 16
    view_offset_scale: float = 1.0
    cross_view_inflation: object = None
    noise_sigma: float = 0.5
    num_cameras: int = 4
    seed: int = 0

    def inflation_matrix(self):
        v = self.num_views
        infl = self.cross_view_inflation
        if infl is None:
            mat = np.ones((v, v))
        elif np.isscalar(infl):
            mat = np.full((v, v), float(infl))
            np.fill_diagonal(mat, 1.0)
        else:
            mat = np.array(infl, dtype=np.float64)
        if mat.shape != (v, v):
            raise InfeasibleConfig(f"inflation must be {v}x{v}")
        if not np.all(np.diag(mat) == 1.0) or np.any(mat < 1.0):
            raise InfeasibleConfig("inflation needs unit diagonal and entries >= 1")
        return (mat + mat.T) / 2.0

    def validate(self):
        for name in ("num_views", "num_ids", "num_test_ids", "images_per_id_per_view", "dim"):
            if getattr(self, name) < 1:
                raise InfeasibleConfig(f"{name} must be >= 1")
        if self.num_cameras == 1:
            raise InfeasibleConfig("a single camera leaves no cross-camera positive pairs")
        if self.num_cameras < 0 or self.noise_sigma < 0 or self.view_offset_scale < 0:
            raise InfeasibleConfig("num_cameras, noise_sigma and view_offset_scale must be >= 0")
        if self.dim < self.num_views:
            raise InfeasibleConfig("dim must be at least num_views to host the view offsets")
        self.inflation_matrix()


@dataclass
class SyntheticSplits:
    train: EmbeddingSet
    query: EmbeddingSet
    gallery: EmbeddingSet


def view_offsets(config: SynthConfig, rng):
    """Per-view offset vectors realising the (symmetrised) inflation ratios."""
    v, dim = config.num_views, config.dim
    # expected |n1 - n2|^2 for two independent noise draws
    base_sq = 2.0 * config.noise_sigma ** 2
    target_sq = config.view_offset_scale ** 2 * (config.inflation_matrix() ** 2 - 1.0) * base_sq
    j = np.eye(v) - 1.0 / v
    gram = -0.5 * j @ target_sq @ j
    evals, evecs = np.linalg.eigh(gram)
    coords = evecs * np.sqrt(np.clip(evals, 0.0, None))
    basis, _ = np.linalg.qr(rng.normal(size=(dim, v)))
    return coords @ basis.T


def generate_synthetic(config: SynthConfig) -> SyntheticSplits:
    """Train / query / gallery splits with disjoint vehicle ids.

    Each test (vehicle, view) cell contributes its first image to the query
    set and the rest to the gallery.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    offsets = view_offsets(config, rng)
    per_coord = config.noise_sigma / math.sqrt(config.dim)
    n_total = config.num_ids + config.num_test_ids
    k = config.images_per_id_per_view

    feats, vids, views, cams, slot = [], [], [], [], []
    for vid in range(n_total):
        base = l2_normalize(rng.normal(size=config.dim))
        for view in range(config.num_views):
            noise = rng.normal(scale=per_coord, size=(k, config.dim)) if per_coord > 0 else np.zeros((k, config.dim))
            feats.append(base + offsets[view] + noise)
            vids.extend([vid] * k)
            views.extend([view] * k)
            if config.num_cameras >= 2:
                cams.extend((vid + view + s) % config.num_cameras for s in range(k))
            slot.extend(range(k))
    feats = l2_normalize(np.vstack(feats))
    vids, views, slot = np.array(vids), np.array(views), np.array(slot)
    cams = np.array(cams) if cams else None
    image_ids = np.arange(vids.size)

    def make(mask):
        return EmbeddingSet(
            features=feats[mask],
            image_ids=image_ids[mask],
            vehicle_ids=vids[mask],
            view_ids=views[mask],
            num_views=config.num_views,
            camera_ids=None if cams is None else cams[mask],
            normalized=True,
        )

    is_train = vids < config.num_ids
    return SyntheticSplits(
        train=make(is_train),
        query=make(~is_train & (slot == 0)),
        gallery=make(~is_train & (slot > 0)),
    )


def sample_single_gallery(query: EmbeddingSet, gallery: EmbeddingSet, seed=0):
    """One-image-per-vehicle gallery protocol.

    The union of ``query`` and ``gallery`` is regrouped: one random image per
    vehicle forms the new gallery, the rest become queries.
    """
    rng = np.random.default_rng(seed)
    feats = np.vstack([query.features, gallery.features])
    union = EmbeddingSet(
        features=feats,
        image_ids=np.concatenate([query.image_ids, gallery.image_ids]),
        vehicle_ids=np.concatenate([query.vehicle_ids, gallery.vehicle_ids]),
        view_ids=np.concatenate([query.view_ids, gallery.view_ids]),
        num_views=max(query.num_views, gallery.num_views),
        camera_ids=None,
        normalized=query.normalized and gallery.normalized,
    )
    picks = []
    for vid in np.unique(union.vehicle_ids):
        members = np.flatnonzero(union.vehicle_ids == vid)
        picks.append(rng.choice(members))
    in_gallery = np.zeros(len(union), dtype=bool)
    in_gallery[picks] = True
    return union.subset(np.flatnonzero(~in_gallery)), union.subset(np.flatnonzero(in_gallery))


def random_loss_instance(rng, loss="lsupcon", dim=None, batch=None, tau=None, num_classes=3,
                         dictionary_size=None):
    """Random normalized batch (every class at least twice) plus, for gsupcon, a dictionary.

    Returns ``(features, kwargs)`` ready for ``finite_diff_check``.
    """
    dim = int(rng.integers(4, 17)) if dim is None else dim
    batch = int(rng.integers(4, 13)) if batch is None else batch
    tau = float(rng.choice([0.05, 0.1, 1.0])) if tau is None else tau
    num_classes = max(1, min(num_classes, batch // 2))
    labels = np.concatenate([np.repeat(np.arange(num_classes), 2),
                             rng.integers(0, num_classes, size=batch - 2 * num_classes)])
    labels = rng.permutation(labels)
    feats = l2_normalize(rng.normal(size=(batch, dim)))
    config = LossConfig(tau=tau)
    if loss == "lsupcon":
        return feats, {"config": config, "labels": labels}
    size = batch + 3 * num_classes if dictionary_size is None else dictionary_size
    extra = size - batch
    dict_labels = np.concatenate([labels, rng.integers(0, num_classes + 2, size=extra)])
    dict_feats = np.vstack([feats, l2_normalize(rng.normal(size=(extra, dim)))]) if extra else feats
    dictionary = GlobalFeatureDictionary(np.arange(size), dict_labels, dict_feats)
    return feats, {"dictionary": dictionary, "config": config, "labels": labels,
                   "image_ids": np.arange(batch)}


# ---------------------------------------------------------------------------
# naive oracles


def oracle_center_matrix(train: EmbeddingSet) -> CenterMatrix:
    """Pair-by-pair reference for the center matrix; deliberately unoptimised."""
    n = len(train)
    if n == 0:
        raise EmptySet("training set is empty")
    v = train.num_views
    sums = [[0.0] * v for _ in range(v)]
    counts = [[0] * v for _ in range(v)]
    rows = [list(map(float, r)) for r in train.features]
    for q in range(n):
        for g in range(n):
            if train.vehicle_ids[g] != train.vehicle_ids[q]:
                continue
            if train.camera_ids is None:
                if g == q:
                    continue
            elif train.camera_ids[g] == train.camera_ids[q]:
                continue
            i, j = int(train.view_ids[q]), int(train.view_ids[g])
            sums[i][j] += math.dist(rows[q], rows[g])
            counts[i][j] += 1
    centers = np.full((v, v), np.nan)
    for i in range(v):
        for j in range(v):
            if counts[i][j]:
                centers[i, j] = sums[i][j] / counts[i][j]
    return CenterMatrix(centers, np.array(counts, dtype=np.int64))


def oracle_evaluate(distances: DistanceMatrix, max_rank: Optional[int] = None) -> EvalReport:
    """Reference mAP/CMC written with plain loops and sorted()."""
    qm, gm = distances.query_meta, distances.gallery_meta
    m, n = distances.shape
    max_rank = n if max_rank is None else min(max_rank, n)
    aps = []
    first_hits = []
    for q in range(m):
        junk = junk_mask(qm, q, gm)
        ranked = sorted(range(n), key=lambda g: (float(distances.values[q, g]), int(gm.image_ids[g])))
        ranked = [g for g in ranked if not junk[g]]
        found = 0
        precisions = []
        first = None
        for pos, g in enumerate(ranked):
            if gm.vehicle_ids[g] == qm.vehicle_ids[q]:
                found += 1
                precisions.append(found / (pos + 1))
                if first is None:
                    first = pos
        if not precisions:
            continue
        aps.append(sum(precisions) / len(precisions))
        first_hits.append(first)
    if not aps:
        raise NoValidQueries("no query has a valid positive in the gallery")
    cmc = np.array([sum(1 for f in first_hits if f <= k) / len(first_hits) for k in range(max_rank)])
    return EvalReport(sum(aps) / len(aps), cmc, len(aps))


# ---------------------------------------------------------------------------
# toy trainer

LOSS_MODES = ("lsupcon", "gsupcon", "both")


@dataclass(frozen=True)
class TrainConfig:
    """Toy trainer settings.

    ``full_batch`` uses every row each step (deterministic descent); otherwise
    batches are ``ids_per_batch`` vehicles times ``batch_size // ids_per_batch``
    images each.
    """

    steps: int = 500
    learning_rate: float = 0.1
    loss_mode: str = "gsupcon"
    batch_size: int = 16
    ids_per_batch: Optional[int] = None
    full_batch: bool = False
    update_dictionary: bool = True
    config: LossConfig = field(default_factory=LossConfig)
    weights: LossWeights = field(default_factory=lambda: LossWeights(0.0, 1.0))
    seed: int = 0

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.learning_rate < 0 or self.steps < 0:
            raise ValueError("steps and learning_rate must be nonnegative")


@dataclass
class TrainResult:
    trained: EmbeddingSet
    trace: List[float]
    stats: ConvergenceStats
    dictionary: GlobalFeatureDictionary


def _sample_pk(rng, labels, p, k):
    classes = np.unique(labels)
    chosen = rng.choice(classes, size=min(p, classes.size), replace=False)
    batch = []
    for c in np.sort(chosen):
        members = np.flatnonzero(labels == c)
        batch.extend(rng.choice(members, size=min(k, members.size), replace=False))
    return np.sort(np.array(batch, dtype=np.int64))


def train_step(features, labels, image_ids, index, dictionary, config: TrainConfig):
    """One descent step on rows ``index``; returns (loss value, new rows, loss output)."""
    batch = features[index]
    outputs = []
    if config.loss_mode in ("lsupcon", "both"):
        outputs.append(lsupcon(batch, config.config, labels=labels[index]))
    if config.loss_mode in ("gsupcon", "both"):
        outputs.append(gsupcon(batch, dictionary, config.config, labels=labels[index],
                               image_ids=image_ids[index]))
    out = outputs[0] if len(outputs) == 1 else combined_loss(None, outputs, config.weights)
    if not np.isfinite(out.value) or not np.all(np.isfinite(out.grad_anchors)):
        raise DivergenceDetected("loss or gradient became non-finite")
    if config.learning_rate == 0:
        return out.value, batch, out
    with np.errstate(invalid="ignore", over="ignore"):
        stepped = batch - config.learning_rate * out.grad_anchors
    if not np.all(np.isfinite(stepped)):
        raise DivergenceDetected("update step produced non-finite features")
    return out.value, l2_normalize(stepped), out


def toy_train(initial: EmbeddingSet, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Gradient descent directly on the embedding rows.

    Each step samples a batch, evaluates the selected loss, moves the batch
    rows along the negative gradient and renormalises them. In the global
    modes the dictionary then receives the batch features of the forward
    pass (unless ``update_dictionary`` is off). Rows outside the batch are
    left bit-for-bit untouched.
    """
    if not initial.normalized:
        raise ValueError("toy_train expects a normalized embedding set")
    rng = np.random.default_rng(config.seed)
    features = np.array(initial.features)
    labels, image_ids = initial.vehicle_ids, initial.image_ids
    dictionary = GlobalFeatureDictionary.from_embeddings(initial)
    if config.full_batch or config.batch_size >= len(initial):
        p = k = None
    else:
        p = config.ids_per_batch or max(2, config.batch_size // 4)
        k = max(2, config.batch_size // p)

    trace = []
    for _ in range(config.steps):
        index = np.arange(len(initial)) if p is None else _sample_pk(rng, labels, p, k)
        forward = features[index].copy()
        value, new_rows, _ = train_step(features, labels, image_ids, index, dictionary, config)
        trace.append(value)
        features[index] = new_rows
        if config.loss_mode != "lsupcon" and config.update_dictionary:
            dictionary = dictionary.update(image_ids[index], forward, config.config.dictionary_momentum)

    trained = initial.with_features(features, normalized=True)
    if config.loss_mode == "lsupcon":
        dictionary = GlobalFeatureDictionary.from_embeddings(trained)
    stats = convergence_stats(trained, dictionary, config.config)
    return TrainResult(trained, trace, stats, dictionary)
