import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from viewreid import (
    CenterMatrix,
    DistanceMatrix,
    ScalingMatrix,
    VabppConfig,
    ViewAwarePostProcessor,
    compute_center_matrix,
    compute_delta,
    euclidean_distances,
    expand_delta,
    load_bundled_delta,
    mtd,
    pairwise_euclidean,
    udd,
    vabpp_pipeline,
)
from viewreid.exceptions import (
    DegenerateCenter,
    MissingDiagonalCenter,
    NegativeDistance,
    NotNormalized,
    ShapeMismatch,
    ViewOutOfRange,
    WrongDistanceKind,
)
from viewreid.synth import oracle_center_matrix

from conftest import make_set, random_set


def raw_matrix(values, qv, gv):
    values = np.asarray(values, dtype=float)
    q = make_set(np.eye(values.shape[0], 2) + 0.1, np.arange(values.shape[0]), qv, num_views=2)
    g = make_set(np.eye(values.shape[1], 2) + 0.1, np.arange(values.shape[1]), gv, num_views=2)
    return DistanceMatrix(values, q.meta, g.meta)


class TestCenterMatrix:
    def test_single_view_pair(self):
        theta = 2 * math.asin(0.2)
        s = make_set([[1.0, 0.0], [math.cos(theta), math.sin(theta)]], [0, 0], camera_ids=[0, 1])
        c = compute_center_matrix(s)
        np.testing.assert_array_equal(c.counts, [[2]])
        assert c.centers[0, 0] == pytest.approx(0.4, abs=1e-12)

    def test_same_camera_pairs_excluded(self):
        s = make_set([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]], [0, 0, 0], [0, 0, 0], camera_ids=[0, 0, 1])
        c = compute_center_matrix(s)
        assert c.counts[0, 0] == 4

    def test_empty_cell_is_nan(self):
        s = make_set([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [0.8, 0.6]], [0, 0, 1, 1], [0, 0, 1, 1],
                     camera_ids=[0, 1, 0, 1])
        c = compute_center_matrix(s)
        np.testing.assert_array_equal(c.counts, [[2, 0], [0, 2]])
        assert np.isnan(c.centers[0, 1]) and np.isnan(c.centers[1, 0])

    def test_no_cameras_excludes_only_self(self):
        s = make_set([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]], [0, 0, 0])
        assert compute_center_matrix(s).counts[0, 0] == 6

    @pytest.mark.parametrize("cameras", [True, False])
    def test_matches_oracle(self, rng, cameras):
        s = random_set(rng, 30, cameras=cameras)
        fast, slow = compute_center_matrix(s), oracle_center_matrix(s)
        np.testing.assert_array_equal(fast.counts, slow.counts)
        np.testing.assert_allclose(fast.centers, slow.centers, rtol=0, atol=1e-12, equal_nan=True)

    def test_requires_normalized(self, rng):
        with pytest.raises(NotNormalized):
            compute_center_matrix(make_set(rng.normal(size=(3, 2)), [0, 0, 1], normalize=False))


class TestComputeDelta:
    def test_ratios(self):
        c = CenterMatrix(np.array([[1.0, 2.0], [0.5, 0.25]]), np.ones((2, 2), dtype=int))
        np.testing.assert_array_equal(compute_delta(c).delta, [[1.0, 0.5], [0.5, 1.0]])

    def test_single_view(self):
        c = CenterMatrix(np.array([[0.7]]), np.array([[3]]))
        np.testing.assert_array_equal(compute_delta(c).delta, [[1.0]])

    def test_fallback(self):
        c = CenterMatrix(np.array([[1.0, np.nan], [0.5, 1.0]]), np.array([[2, 0], [2, 2]]))
        d = compute_delta(c, VabppConfig(fallback_delta=1.0))
        assert d.delta[0, 1] == 1.0 and d.delta[1, 0] == 2.0

    def test_missing_diagonal(self):
        c = CenterMatrix(np.array([[1.0, 1.0], [1.0, np.nan]]), np.array([[2, 2], [2, 0]]))
        with pytest.raises(MissingDiagonalCenter) as info:
            compute_delta(c)
        assert info.value.view == 1

    def test_degenerate_center(self):
        c = CenterMatrix(np.array([[0.0, 1.0], [1.0, 1.0]]), np.full((2, 2), 2))
        with pytest.raises(DegenerateCenter):
            compute_delta(c)

    def test_defining_identity(self, rng):
        s = random_set(rng, 60, num_ids=4)
        c = compute_center_matrix(s)
        d = compute_delta(c)
        ok = c.populated
        np.testing.assert_allclose((c.centers * d.delta)[ok], np.broadcast_to(np.diag(c.centers)[:, None], ok.shape)[ok],
                                   rtol=0, atol=1e-12)

    def test_scaling_matrix_validation(self):
        with pytest.raises(ValueError):
            ScalingMatrix([[1.0, -0.5], [1.0, 1.0]])
        with pytest.raises(ValueError):
            ScalingMatrix([[0.9, 1.0], [1.0, 1.0]])
        with pytest.raises(ShapeMismatch):
            ScalingMatrix([[1.0, 1.0]])

    def test_difficulty_is_reciprocal(self):
        d = ScalingMatrix([[1.0, 0.5], [2.0, 1.0]])
        np.testing.assert_array_equal(d.difficulty, [[1.0, 2.0], [0.5, 1.0]])


class TestUddMtd:
    def test_udd_square(self):
        d = raw_matrix([[0.5, 1.5]], [0], [0, 1])
        out = udd(d, 2.0)
        np.testing.assert_allclose(out.values, [[0.25, 2.25]])
        assert out.kind == "unified" and out.gamma == 2.0

    def test_udd_identity_at_one(self):
        d = raw_matrix([[0.3, 0.9]], [0], [0, 1])
        np.testing.assert_array_equal(udd(d, 1.0).values, d.values)

    def test_udd_rejects_wrong_kind(self):
        d = udd(raw_matrix([[0.3]], [0], [0]), 2.0)
        with pytest.raises(WrongDistanceKind):
            udd(d, 2.0)

    def test_negative_distances(self):
        with pytest.raises(NegativeDistance):
            raw_matrix([[-0.1]], [0], [0])

    def test_mtd_vehicleid_factors(self):
        delta = load_bundled_delta("vehicleid")
        d = udd(raw_matrix([[1.0, 1.0], [1.0, 1.0]], [0, 1], [0, 1]), 1.0)
        np.testing.assert_allclose(mtd(d, delta).values, [[1.0, 0.4597], [0.6455, 1.0]], atol=0)

    def test_mtd_veri776_front_to_rear(self):
        delta = load_bundled_delta("veri776")
        d = udd(raw_matrix([[2.0]], [0], [1]), 1.0)
        assert mtd(d, delta).values[0, 0] == pytest.approx(2.0 * 0.8930, abs=1e-12)

    def test_mtd_single_view_is_identity(self):
        delta = ScalingMatrix([[1.0, 0.3], [0.7, 1.0]])
        d = udd(raw_matrix([[0.2, 0.8]], [1], [1, 1]), 2.0)
        out = mtd(d, delta)
        np.testing.assert_array_equal(out.values, d.values)
        assert out.kind == "scaled"

    def test_mtd_rejects_raw(self):
        with pytest.raises(WrongDistanceKind):
            mtd(raw_matrix([[0.2]], [0], [0]), ScalingMatrix.identity(2))

    def test_expand_delta(self):
        delta = load_bundled_delta("vehicleid")
        np.testing.assert_array_equal(expand_delta(delta, [0], [0, 1]), [[1.0, 0.4597]])
        np.testing.assert_array_equal(expand_delta(ScalingMatrix.identity(3), [0, 2], [1, 1, 0]), np.ones((2, 3)))

    def test_expand_delta_loop_oracle(self, rng):
        delta = load_bundled_delta("veri776")
        qv, gv = rng.integers(0, 8, 7), rng.integers(0, 8, 11)
        out = expand_delta(delta, qv, gv)
        for a in range(7):
            for b in range(11):
                assert out[a, b] == delta.delta[qv[a]][gv[b]]

    def test_expand_delta_view_range(self):
        with pytest.raises(ViewOutOfRange):
            expand_delta(ScalingMatrix.identity(2), [2], [0])


class TestPipeline:
    def test_identity_path(self, rng):
        q, g = random_set(rng, 5), random_set(rng, 9, image_offset=100)
        out = vabpp_pipeline(q, g, ScalingMatrix.identity(3), VabppConfig(gamma=1.0))
        np.testing.assert_allclose(out.values, pairwise_euclidean(q, g).values, atol=0)

    def test_within_view_order_preserved(self, rng):
        q, g = random_set(rng, 12, num_views=3), random_set(rng, 60, num_views=3, image_offset=100)
        delta = ScalingMatrix([[1.0, 0.4, 2.0], [0.7, 1.0, 0.9], [1.3, 0.2, 1.0]])
        raw = pairwise_euclidean(q, g).values
        scaled = vabpp_pipeline(q, g, delta, VabppConfig(gamma=4.0)).values
        for v in range(3):
            cols = np.flatnonzero(g.view_ids == v)
            r, s = raw[:, cols], scaled[:, cols]
            np.testing.assert_array_equal(np.sign(r[:, :, None] - r[:, None, :]),
                                          np.sign(s[:, :, None] - s[:, None, :]))


class TestEstimator:
    def test_params_and_clone(self):
        est = ViewAwarePostProcessor(gamma=4.0)
        assert est.get_params() == {"gamma": 4.0, "fallback_delta": 1.0, "num_views": None}
        copy = clone(est)
        assert copy.get_params() == est.get_params() and copy is not est

    def test_fit_matches_functional(self, rng):
        s = random_set(rng, 40, num_ids=4)
        est = ViewAwarePostProcessor().fit(s)
        np.testing.assert_array_equal(est.delta_.delta, compute_delta(compute_center_matrix(s)).delta)
        assert est.n_features_in_ == 4

    def test_fit_from_arrays(self, rng):
        s = random_set(rng, 40, num_ids=4)
        est = ViewAwarePostProcessor(num_views=3).fit(s.features, s.vehicle_ids, views=s.view_ids,
                                                      cameras=s.camera_ids)
        np.testing.assert_array_equal(est.delta_.delta, ViewAwarePostProcessor().fit(s).delta_.delta)

    def test_transform(self, rng):
        delta = ScalingMatrix([[1.0, 0.5], [2.0, 1.0]])
        est = ViewAwarePostProcessor.from_delta(delta, gamma=2.0)
        out = est.transform(np.array([[1.0, 2.0]]), query_views=[0], gallery_views=[0, 1])
        np.testing.assert_allclose(out, [[1.0, 2.0]])
        dm = raw_matrix([[1.0, 2.0]], [1], [0, 1])
        np.testing.assert_allclose(est.transform(dm).values, [[2.0, 4.0]])

    def test_pairwise_distances_array_path(self, rng):
        q, g = random_set(rng, 4), random_set(rng, 6, image_offset=10)
        est = ViewAwarePostProcessor.from_delta(ScalingMatrix([[1, .5, .8], [.9, 1, .7], [1.1, .6, 1]]))
        a = est.pairwise_distances(q, g).values
        b = est.pairwise_distances(q.features, g.features, q.view_ids, g.view_ids)
        np.testing.assert_allclose(a, b, atol=1e-15)
        np.testing.assert_allclose(a, euclidean_distances(q.features, g.features) ** 2
                                   * expand_delta(est.delta_, q.view_ids, g.view_ids), atol=1e-15)

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            ViewAwarePostProcessor().transform(np.ones((1, 1)), [0], [0])
